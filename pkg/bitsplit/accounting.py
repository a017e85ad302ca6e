"""
Model size and FLOPs accounting for any precision assignment.

Sizes: a quantized matrix stores ceil(params * bits / 8) bytes per branch plus 4 bytes per
scale (one per matrix, or one per row for the embedding); full-precision parameters cost
4 bytes. Sizes in MB are mebibytes.

FLOPs: a full-precision M x K by K x N product costs 2MKN; with w-bit weights and a-bit
activations it costs 2MKN * w * a / 64. Embedding lookups cost nothing. Counts are kept in
integer units of 1/64 FLOP so equal configurations compare exactly.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

from bitsplit.exceptions import ConfigurationError
from bitsplit.schemas import ModelSpec, QuantScheme
from bitsplit.transformer import LAYER_MATRICES, matrix_names, matrix_shape, uniform_precision

logger = logging.getLogger(__name__)

MB = 2 ** 20
FP_BYTES = 4
SCALE_BYTES = 4
FULL_BITS = 32
FLOP_UNITS = 64

# FLOPs per element of the full-precision elementwise ops
ELEMENTWISE_COST = {"add": 1, "layer_norm": 5, "softmax": 3, "gelu": 8, "tanh": 1}

BERT_BASE = ModelSpec(
    num_layers=12,
    hidden=768,
    heads=12,
    ffn_dim=3072,
    vocab=30522,
    max_seq_len=512,
    type_vocab=2,
    num_classes=2,
)
PRESETS = {"bert-base": BERT_BASE, "desk": ModelSpec()}


@dataclass(frozen=True)
class BitConfig:
    """W-E-A notation: Transformer weight bits, word-embedding bits, activation bits."""
    weight_bits: int
    embedding_bits: int
    activation_bits: int

    @classmethod
    def parse(cls, text: str) -> "BitConfig":
        try:
            w, e, a = (int(part) for part in text.split("-"))
        except ValueError as exc:
            raise ConfigurationError(f"Bit notation must look like 1-1-8, got '{text}'") from exc
        for bits in (w, e, a):
            if not 1 <= bits <= FULL_BITS:
                raise ConfigurationError(f"Bit-width {bits} out of range in '{text}'")
        return cls(w, e, a)

    def precision(self, spec: ModelSpec) -> dict[str, QuantScheme]:
        return uniform_precision(spec, QuantScheme.from_bits(self.weight_bits), QuantScheme.from_bits(self.embedding_bits, "row"))

    def __str__(self) -> str:
        return f"{self.weight_bits}-{self.embedding_bits}-{self.activation_bits}"


@dataclass
class CostRow:
    """One line of a cost breakdown."""
    module: str
    kind: str
    params: int
    bits: int
    branches: int
    size_bytes: int
    flops: float


def matrix_bytes(rows: int, cols: int, scheme: QuantScheme, branches: int = 1) -> int:
    if not scheme.quantized:
        return FP_BYTES * rows * cols * branches
    scales = rows if scheme.granularity == "row" else 1
    return branches * (math.ceil(rows * cols * scheme.bits / 8) + SCALE_BYTES * scales)


def full_precision_params(spec: ModelSpec) -> dict[str, int]:
    """Parameters that are never quantized: layer norms, biases, classifier."""
    h, a, f = spec.hidden, spec.attention_dim, spec.inner_dim
    params = {"embedding.norm": 2 * h}
    for layer in range(spec.num_layers):
        params[f"layer{layer}.biases"] = 3 * a + h + f + h
        params[f"layer{layer}.norms"] = 4 * h
    params["pooler.bias"] = h
    params["classifier"] = h * spec.num_classes + spec.num_classes
    return params


class CostModel:
    """
    Size and FLOPs of one configuration.

    split names the matrices realized as two binary branches. With count_split_as_full_width,
    FLOPs treat a split matrix (and the attention/FFN elementwise work of its layer) at the
    width-1.0 shape, which is how the split model is deployed.
    """

    def __init__(
        self,
        spec: ModelSpec,
        precision: Mapping[str, QuantScheme],
        activation_bits: int = FULL_BITS,
        split: Optional[Iterable[str]] = None,
        count_split_as_full_width: bool = True,
    ):
        self.spec = spec
        self.precision = dict(precision)
        self.activation_bits = activation_bits
        self.split = set(split or ())
        self.count_split_as_full_width = count_split_as_full_width
        names = set(matrix_names(spec))
        if not names <= set(self.precision):
            raise ConfigurationError("precision map does not cover every matrix")
        unknown = self.split - names
        if unknown:
            raise ConfigurationError(f"unknown split matrices: {', '.join(sorted(unknown))}")
        for name in self.split:
            if self.precision[name].kind != "binary":
                raise ConfigurationError(f"split matrix '{name}' must be binary")

    def branches(self, name: str) -> int:
        return 2 if name in self.split else 1

    # Size
    def size_breakdown(self) -> list[CostRow]:
        rows = []
        for name in matrix_names(self.spec):
            r, c = matrix_shape(self.spec, name)
            scheme = self.precision[name]
            rows.append(CostRow(
                module=name,
                kind="matrix",
                params=r * c * self.branches(name),
                bits=scheme.bits,
                branches=self.branches(name),
                size_bytes=matrix_bytes(r, c, scheme, self.branches(name)),
                flops=0.0,
            ))
        for name, count in full_precision_params(self.spec).items():
            rows.append(CostRow(name, "full-precision", count, FULL_BITS, 1, FP_BYTES * count, 0.0))
        return rows

    def size_bytes(self) -> int:
        return sum(row.size_bytes for row in self.size_breakdown())

    def size_mb(self) -> float:
        return self.size_bytes() / MB

    def param_count(self) -> int:
        return sum(row.params for row in self.size_breakdown())

    # FLOPs
    def _matmul_units(self, m: int, k: int, n: int, weight_bits: int, activation_bits: int) -> int:
        macs = m * k * n
        if weight_bits >= FULL_BITS or activation_bits >= FULL_BITS:
            return 2 * macs * FLOP_UNITS
        return 2 * macs * weight_bits * activation_bits

    def _linear_units(self, name: str, m: int) -> int:
        scheme = self.precision[name]
        weight_bits = scheme.bits if scheme.quantized else FULL_BITS
        if name in self.split and self.count_split_as_full_width:
            rows, cols = matrix_shape(self.spec.at_width(1.0), name)
            return self._matmul_units(m, cols, rows, weight_bits, self.activation_bits)
        rows, cols = matrix_shape(self.spec, name)
        return self.branches(name) * self._matmul_units(m, cols, rows, weight_bits, self.activation_bits)

    def _layer_spec(self, layer: int, matrix: str) -> ModelSpec:
        if self.count_split_as_full_width and f"layer{layer}.{matrix}" in self.split:
            return self.spec.at_width(1.0)
        return self.spec

    def flop_breakdown(self, seq_len: int = 128) -> list[CostRow]:
        t, h = seq_len, self.spec.hidden
        rows: list[CostRow] = []

        def add(module: str, kind: str, units: int):
            rows.append(CostRow(module, kind, 0, 0, 1, 0, units / FLOP_UNITS))

        add("embedding.sum", "elementwise", 2 * t * h * ELEMENTWISE_COST["add"] * FLOP_UNITS)
        add("embedding.norm", "elementwise", t * h * ELEMENTWISE_COST["layer_norm"] * FLOP_UNITS)
        for layer in range(self.spec.num_layers):
            for matrix in LAYER_MATRICES:
                name = f"layer{layer}.{matrix}"
                add(name, "linear", self._linear_units(name, t))
            attn_spec = self._layer_spec(layer, "query")
            a, heads = attn_spec.attention_dim, attn_spec.active_heads
            act = self.activation_bits
            add(f"layer{layer}.scores", "attention", self._matmul_units(t, a, t, act, act))
            add(f"layer{layer}.context", "attention", self._matmul_units(t, t, a, act, act))
            add(f"layer{layer}.softmax", "elementwise", heads * t * t * ELEMENTWISE_COST["softmax"] * FLOP_UNITS)
            f = self._layer_spec(layer, "ffn_mid").inner_dim
            add(f"layer{layer}.gelu", "elementwise", t * f * ELEMENTWISE_COST["gelu"] * FLOP_UNITS)
            add(f"layer{layer}.residual", "elementwise", 2 * t * h * ELEMENTWISE_COST["add"] * FLOP_UNITS)
            add(f"layer{layer}.norms", "elementwise", 2 * t * h * ELEMENTWISE_COST["layer_norm"] * FLOP_UNITS)
        add("pooler", "linear", self._linear_units("pooler", 1))
        add("pooler.tanh", "elementwise", h * ELEMENTWISE_COST["tanh"] * FLOP_UNITS)
        add("classifier", "linear", self._matmul_units(1, h, self.spec.num_classes, FULL_BITS, FULL_BITS))
        return rows

    def flop_units(self, seq_len: int = 128) -> int:
        return int(sum(round(row.flops * FLOP_UNITS) for row in self.flop_breakdown(seq_len)))

    def flops(self, seq_len: int = 128) -> float:
        return self.flop_units(seq_len) / FLOP_UNITS


def model_size_bytes(spec: ModelSpec, precision: Mapping[str, QuantScheme], split: Optional[Iterable[str]] = None) -> int:
    return CostModel(spec, precision, split=split).size_bytes()


def model_flops(
    spec: ModelSpec,
    precision: Mapping[str, QuantScheme],
    activation_bits: int = FULL_BITS,
    seq_len: int = 128,
    split: Optional[Iterable[str]] = None,
    count_split_as_full_width: bool = True,
) -> float:
    return CostModel(spec, precision, activation_bits, split, count_split_as_full_width).flops(seq_len)


def binary_config(spec: ModelSpec, bits: BitConfig, split_all: bool) -> CostModel:
    """All-binary configuration; with split_all every matrix is a Pair at width 0.5."""
    if split_all:
        spec = spec.at_width(0.5)
    precision = bits.precision(spec)
    split = matrix_names(spec) if split_all else None
    return CostModel(spec, precision, bits.activation_bits, split)


def reference_rows(spec: ModelSpec = BERT_BASE) -> list[tuple[str, CostModel]]:
    """Full precision plus direct-binary and split-binary rows at 8- and 4-bit activations."""
    rows = [("full-prec 32-32-32", CostModel(spec, BitConfig(32, 32, 32).precision(spec), FULL_BITS))]
    for text in ("1-1-8", "1-1-4"):
        bits = BitConfig.parse(text)
        rows.append((f"BWN {text}", binary_config(spec, bits, split_all=False)))
        rows.append((f"TWS {text}", binary_config(spec, bits, split_all=True)))
    return rows


def split_costs(spec: ModelSpec) -> dict[str, int]:
    """Extra bytes of a split Pair over a binary Single, per matrix, at width 0.5."""
    half = spec.at_width(0.5)
    costs = {}
    for name in matrix_names(half):
        rows, cols = matrix_shape(half, name)
        scheme = QuantScheme.binary("row" if name == "embedding" else "matrix")
        costs[name] = matrix_bytes(rows, cols, scheme, 2) - matrix_bytes(rows, cols, scheme, 1)
    return costs


def base_size(spec: ModelSpec) -> int:
    """Size of the half-width all-binary model (C0)."""
    half = spec.at_width(0.5)
    return CostModel(half, uniform_precision(half, QuantScheme.binary())).size_bytes()
