"""
Desk-scale BERT-style encoder with per-matrix weight quantization.

Every splittable matrix (the stacked embedding table, the six matrices of each layer
and the pooler) holds one latent branch (Single) or two (Pair); a Pair's output is the
sum of its branch products. Activations are quantized at the input of every matrix
multiplication; layer norms, residual adds, softmax, biases and the classifier stay
full precision.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional

import numpy as np
import torch
from torch import nn

from bitsplit.exceptions import CheckpointFormatError, ConfigurationError, ShapeError, UnknownTagError
from bitsplit.numerics import gelu, layer_norm, linear, matmul, softmax
from bitsplit.quantizers import (
    ActivationQuantizer,
    LsqQuantizer,
    binarize,
    make_activation_quantizer,
    quantize_weight,
    ternarize,
)
from bitsplit.schemas import ModelSpec, QuantConfig, QuantScheme

logger = logging.getLogger(__name__)

PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3
INIT_STD = 0.02
MASK_VALUE = -1e9

CHECKPOINT_MAGIC = b"BSCK"
CHECKPOINT_VERSION = 1


class Part(str, Enum):
    MHA_QK = "MHA-QK"
    MHA_V = "MHA-V"
    MHA_O = "MHA-O"
    FFN_MID = "FFN-Mid"
    FFN_OUT = "FFN-Out"
    EMBEDDING = "Embedding"
    POOLER = "Pooler"


TRANSFORMER_PARTS = (Part.MHA_QK, Part.MHA_V, Part.MHA_O, Part.FFN_MID, Part.FFN_OUT)

LAYER_MATRICES = {
    "query": Part.MHA_QK,
    "key": Part.MHA_QK,
    "value": Part.MHA_V,
    "attn_out": Part.MHA_O,
    "ffn_mid": Part.FFN_MID,
    "ffn_out": Part.FFN_OUT,
}


@dataclass(frozen=True)
class PartTag:
    """A Transformer part in one layer, or the embedding / pooler (layer None)."""
    part: Part
    layer: Optional[int] = None

    def __str__(self) -> str:
        return self.part.value if self.layer is None else f"{self.part.value}@{self.layer}"

    @classmethod
    def parse(cls, text: str) -> "PartTag":
        label, _, layer = text.partition("@")
        try:
            return cls(Part(label), int(layer) if layer else None)
        except ValueError as exc:
            raise UnknownTagError(text) from exc


def matrix_names(spec: ModelSpec) -> list[str]:
    """All splittable matrices in a fixed order: embedding, layers, pooler."""
    names = ["embedding"]
    for layer in range(spec.num_layers):
        names.extend(f"layer{layer}.{matrix}" for matrix in LAYER_MATRICES)
    names.append("pooler")
    return names


def matrix_tag(name: str) -> PartTag:
    if name == "embedding":
        return PartTag(Part.EMBEDDING)
    if name == "pooler":
        return PartTag(Part.POOLER)
    prefix, _, matrix = name.partition(".")
    if not prefix.startswith("layer") or matrix not in LAYER_MATRICES:
        raise UnknownTagError(name)
    return PartTag(LAYER_MATRICES[matrix], int(prefix[len("layer"):]))


def matrix_shape(spec: ModelSpec, name: str) -> tuple[int, int]:
    """(rows, cols) of a splittable matrix; rows are output features."""
    h, a, f = spec.hidden, spec.attention_dim, spec.inner_dim
    if name == "embedding":
        return spec.embedding_rows, h
    if name == "pooler":
        return h, h
    matrix = name.partition(".")[2]
    return {
        "query": (a, h),
        "key": (a, h),
        "value": (a, h),
        "attn_out": (h, a),
        "ffn_mid": (f, h),
        "ffn_out": (h, f),
    }[matrix]


def uniform_precision(spec: ModelSpec, scheme: QuantScheme, embedding: Optional[QuantScheme] = None) -> dict[str, QuantScheme]:
    """The same scheme everywhere; the embedding is quantized per row."""
    embedding = embedding or scheme
    if embedding.quantized:
        embedding = embedding.model_copy(update={"granularity": "row"})
    precision = {name: scheme for name in matrix_names(spec)}
    precision["embedding"] = embedding
    return precision


def full_precision(spec: ModelSpec) -> dict[str, QuantScheme]:
    return uniform_precision(spec, QuantScheme.full())


def plan_precision(spec: ModelSpec, ternary: set[str]) -> dict[str, QuantScheme]:
    """Ternary for the named matrices, binary for the rest."""
    precision = {}
    for name in matrix_names(spec):
        granularity = "row" if name == "embedding" else "matrix"
        precision[name] = QuantScheme.ternary(granularity) if name in ternary else QuantScheme.binary(granularity)
    return precision


def validate_precision(spec: ModelSpec, precision: Mapping[str, QuantScheme]) -> None:
    names = matrix_names(spec)
    missing = [n for n in names if n not in precision]
    if missing:
        raise ConfigurationError(f"Precision map is missing {len(missing)} matrices: {', '.join(missing[:5])}")
    unknown = sorted(set(precision) - set(names))
    if unknown:
        raise ConfigurationError(f"Precision map names unknown matrices: {', '.join(unknown[:5])}")
    for name, scheme in precision.items():
        if scheme.granularity == "row" and name != "embedding":
            raise ConfigurationError(f"Row granularity is only allowed for the embedding, not '{name}'")


@dataclass
class Intermediates:
    """Distillation hook points: embedding output, and each layer's MHA and FFN outputs."""
    embedding: torch.Tensor
    attention: list[torch.Tensor] = field(default_factory=list)
    ffn: list[torch.Tensor] = field(default_factory=list)


@dataclass
class ModelOutput:
    logits: torch.Tensor
    intermediates: Intermediates


class LayerNorm(nn.Module):
    def __init__(self, size: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(size))
        self.bias = nn.Parameter(torch.zeros(size))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias)


class QuantLinear(nn.Module):
    """
    Linear layer over one or two latent weight branches with a single full-precision bias.
    The input goes through the activation quantizer once and feeds every branch.
    """

    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        scheme: QuantScheme,
        act: ActivationQuantizer,
        scale_rule: str = "mean",
    ):
        super().__init__()
        self.name = name
        self.scheme = scheme
        self.scale_rule = scale_rule
        self.act = act
        self.quantize_weights = True
        self.branches = nn.ParameterList([nn.Parameter(torch.randn(out_features, in_features) * INIT_STD)])
        self.bias = nn.Parameter(torch.zeros(out_features))

    @property
    def is_pair(self) -> bool:
        return len(self.branches) == 2

    def branch_weight(self, index: int) -> torch.Tensor:
        w = self.branches[index]
        return quantize_weight(w, self.scheme, self.scale_rule) if self.quantize_weights else w

    def effective_weight(self) -> torch.Tensor:
        """Sum of the (quantized) branches, detached."""
        with torch.no_grad():
            return sum(self.branch_weight(i) for i in range(len(self.branches)))

    def set_branches(self, weights: list[torch.Tensor], scheme: Optional[QuantScheme] = None) -> None:
        self.branches = nn.ParameterList([nn.Parameter(w.detach().clone()) for w in weights])
        if scheme is not None:
            self.scheme = scheme

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.act(x)
        out = linear(x, self.branch_weight(0))
        for index in range(1, len(self.branches)):
            out = out + linear(x, self.branch_weight(index))
        return out + self.bias


class QuantEmbedding(nn.Module):
    """Word, position and token-type rows stacked into one table, quantized per row."""

    def __init__(self, spec: ModelSpec, scheme: QuantScheme, dropout: float, scale_rule: str = "mean"):
        super().__init__()
        self.name = "embedding"
        self.spec = spec
        self.scheme = scheme
        self.scale_rule = scale_rule
        self.quantize_weights = True
        self.branches = nn.ParameterList([nn.Parameter(torch.randn(spec.embedding_rows, spec.hidden) * INIT_STD)])
        self.norm = LayerNorm(spec.hidden)
        self.dropout = nn.Dropout(dropout)

    @property
    def is_pair(self) -> bool:
        return len(self.branches) == 2

    def branch_weight(self, index: int) -> torch.Tensor:
        w = self.branches[index]
        return quantize_weight(w, self.scheme, self.scale_rule) if self.quantize_weights else w

    def effective_weight(self) -> torch.Tensor:
        with torch.no_grad():
            return sum(self.branch_weight(i) for i in range(len(self.branches)))

    def set_branches(self, weights: list[torch.Tensor], scheme: Optional[QuantScheme] = None) -> None:
        self.branches = nn.ParameterList([nn.Parameter(w.detach().clone()) for w in weights])
        if scheme is not None:
            self.scheme = scheme

    def forward(self, input_ids: torch.Tensor, token_type_ids: torch.Tensor) -> torch.Tensor:
        table = self.branch_weight(0)
        for index in range(1, len(self.branches)):
            table = table + self.branch_weight(index)
        seq_len = input_ids.shape[1]
        positions = torch.arange(seq_len) + self.spec.vocab
        types = token_type_ids + self.spec.vocab + self.spec.max_seq_len
        e = table[input_ids] + table[positions].unsqueeze(0) + table[types]
        return self.dropout(self.norm(e))


class QuantMatmul(nn.Module):
    """Activation-by-activation product with both operands quantized."""

    def __init__(self, left: ActivationQuantizer, right: ActivationQuantizer):
        super().__init__()
        self.left = left
        self.right = right

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return matmul(self.left(a), self.right(b))


class SelfAttention(nn.Module):
    def __init__(self, spec: ModelSpec, layer: int, precision: Mapping[str, QuantScheme], quant: QuantConfig, dropout: float):
        super().__init__()
        h, a = spec.hidden, spec.attention_dim
        act = lambda signed=True: make_activation_quantizer(quant.activation_quantizer, quant.activation_bits, signed)
        scheme = lambda matrix: precision[f"layer{layer}.{matrix}"]
        self.heads = spec.active_heads
        self.head_dim = spec.head_dim
        self.query = QuantLinear(f"layer{layer}.query", h, a, scheme("query"), act(), quant.scale_rule)
        self.key = QuantLinear(f"layer{layer}.key", h, a, scheme("key"), act(), quant.scale_rule)
        self.value = QuantLinear(f"layer{layer}.value", h, a, scheme("value"), act(), quant.scale_rule)
        self.attn_out = QuantLinear(f"layer{layer}.attn_out", a, h, scheme("attn_out"), act(), quant.scale_rule)
        self.scores = QuantMatmul(act(), act())
        # attention probabilities are nonnegative
        self.context = QuantMatmul(act(signed=False), act())
        self.norm = LayerNorm(h)
        self.dropout = nn.Dropout(dropout)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        batch, seq_len, _ = x.shape
        return x.view(batch, seq_len, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        batch, seq_len, _ = x.shape
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(x))
        v = self._split_heads(self.value(x))
        scores = self.scores(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim) + mask
        probs = self.dropout(softmax(scores))
        context = self.context(probs, v).transpose(1, 2).reshape(batch, seq_len, self.heads * self.head_dim)
        out = self.dropout(self.attn_out(context))
        return self.norm(x + out)


class FeedForward(nn.Module):
    def __init__(self, spec: ModelSpec, layer: int, precision: Mapping[str, QuantScheme], quant: QuantConfig, dropout: float):
        super().__init__()
        h, f = spec.hidden, spec.inner_dim
        act = lambda: make_activation_quantizer(quant.activation_quantizer, quant.activation_bits)
        self.ffn_mid = QuantLinear(f"layer{layer}.ffn_mid", h, f, precision[f"layer{layer}.ffn_mid"], act(), quant.scale_rule)
        self.ffn_out = QuantLinear(f"layer{layer}.ffn_out", f, h, precision[f"layer{layer}.ffn_out"], act(), quant.scale_rule)
        self.norm = LayerNorm(h)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.dropout(self.ffn_out(gelu(self.ffn_mid(x))))
        return self.norm(x + out)


class EncoderLayer(nn.Module):
    def __init__(self, spec: ModelSpec, layer: int, precision: Mapping[str, QuantScheme], quant: QuantConfig, dropout: float):
        super().__init__()
        self.attention = SelfAttention(spec, layer, precision, quant, dropout)
        self.ffn = FeedForward(spec, layer, precision, quant, dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        m = self.attention(x, mask)
        return m, self.ffn(m)


class QuantBert(nn.Module):
    """Encoder plus tanh pooler on [CLS] and a full-precision classifier."""

    def __init__(self, spec: ModelSpec, precision: Mapping[str, QuantScheme], quant: QuantConfig, dropout: float):
        super().__init__()
        self.spec = spec
        self.quant = quant
        self.dropout_p = dropout
        self.embedding = QuantEmbedding(spec, precision["embedding"], dropout, quant.scale_rule)
        self.layers = nn.ModuleList(EncoderLayer(spec, layer, precision, quant, dropout) for layer in range(spec.num_layers))
        self.pooler = QuantLinear(
            "pooler",
            spec.hidden,
            spec.hidden,
            precision["pooler"],
            make_activation_quantizer(quant.activation_quantizer, quant.activation_bits),
            quant.scale_rule,
        )
        self.pooler_dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(spec.hidden, spec.num_classes)
        with torch.no_grad():
            self.classifier.weight.normal_(0.0, INIT_STD)
            self.classifier.bias.zero_()

    def matrices(self) -> dict[str, nn.Module]:
        """Splittable matrices keyed by name, in matrix_names order."""
        found = {"embedding": self.embedding}
        for layer in self.layers:
            for module in (layer.attention.query, layer.attention.key, layer.attention.value,
                           layer.attention.attn_out, layer.ffn.ffn_mid, layer.ffn.ffn_out):
                found[module.name] = module
        found["pooler"] = self.pooler
        return found

    @property
    def precision(self) -> dict[str, QuantScheme]:
        return {name: module.scheme for name, module in self.matrices().items()}

    def set_precision(self, precision: Mapping[str, QuantScheme]) -> None:
        """Switch schemes in place, e.g. ternary to binary for gradual binarization."""
        validate_precision(self.spec, precision)
        for name, module in self.matrices().items():
            module.scheme = precision[name]

    def forward(self, input_ids: torch.Tensor, token_type_ids: Optional[torch.Tensor] = None) -> ModelOutput:
        if input_ids.dim() != 2 or input_ids.shape[0] == 0 or input_ids.shape[1] == 0:
            raise ShapeError("token batch must be a non-empty [batch, seq] tensor", tuple(input_ids.shape))
        if input_ids.shape[1] > self.spec.max_seq_len:
            raise ShapeError("sequence longer than the position table", tuple(input_ids.shape), (self.spec.max_seq_len,))
        if int(input_ids.max()) >= self.spec.vocab or int(input_ids.min()) < 0:
            raise ShapeError("token id outside the vocabulary", (int(input_ids.min()), int(input_ids.max())), (self.spec.vocab,))
        if token_type_ids is None:
            token_type_ids = torch.zeros_like(input_ids)

        mask = torch.zeros(input_ids.shape, dtype=torch.get_default_dtype())
        mask = mask.masked_fill(input_ids == PAD_ID, MASK_VALUE)[:, None, None, :]

        x = self.embedding(input_ids, token_type_ids)
        inter = Intermediates(embedding=x)
        for layer in self.layers:
            m, x = layer(x, mask)
            inter.attention.append(m)
            inter.ffn.append(x)
        pooled = torch.tanh(self.pooler(x[:, 0]))
        logits = self.classifier(self.pooler_dropout(pooled))
        return ModelOutput(logits=logits, intermediates=inter)


def build(
    spec: ModelSpec,
    precision: Mapping[str, QuantScheme],
    quant: Optional[QuantConfig] = None,
    dropout: float = 0.1,
) -> QuantBert:
    """Build a model; the precision map must name every splittable matrix."""
    validate_precision(spec, precision)
    model = QuantBert(spec, dict(precision), quant or QuantConfig(), dropout)
    logger.debug("Built %d-layer model at width %.1f", spec.num_layers, spec.width)
    return model


def modules_by_tag(model: QuantBert) -> dict[PartTag, list[nn.Module]]:
    groups: dict[PartTag, list[nn.Module]] = {}
    for name, module in model.matrices().items():
        groups.setdefault(matrix_tag(name), []).append(module)
    return groups


def parameters_by_tag(model: QuantBert) -> dict[PartTag, list[nn.Parameter]]:
    """Latent weight branches grouped by Transformer part and layer, plus embedding and pooler."""
    return {
        tag: [p for module in modules for p in module.branches]
        for tag, modules in modules_by_tag(model).items()
    }


def resolve_modules(model: QuantBert, tag: str) -> list[nn.Module]:
    """A matrix name ('layer1.query') or a part tag ('MHA-QK@1', 'Pooler')."""
    matrices = model.matrices()
    if tag in matrices:
        return [matrices[tag]]
    groups = modules_by_tag(model)
    parsed = PartTag.parse(tag)
    if parsed not in groups:
        raise UnknownTagError(tag)
    return groups[parsed]


def set_quantization(model: nn.Module, enabled: bool) -> None:
    """Turn every weight and activation quantizer on or off."""
    for module in model.modules():
        if isinstance(module, (QuantLinear, QuantEmbedding)):
            module.quantize_weights = enabled
        elif isinstance(module, ActivationQuantizer):
            module.enabled = enabled


def activation_sites(model: nn.Module) -> list[str]:
    """Matrix multiplications that quantize their activation inputs."""
    return [
        name for name, module in model.named_modules()
        if isinstance(module, (QuantLinear, QuantMatmul))
        and any(isinstance(q, ActivationQuantizer) and q.bits < 32 for q in module.children())
    ]


def lsq_quantizers(model: nn.Module) -> list[LsqQuantizer]:
    return [m for m in model.modules() if isinstance(m, LsqQuantizer)]


def init_from_wider(student: QuantBert, teacher: QuantBert) -> QuantBert:
    """
    Initialize a (possibly narrower) student from a full-width model: leading heads and FFN
    neurons are kept, everything else is copied.
    """
    if student.spec.hidden != teacher.spec.hidden or student.spec.num_layers != teacher.spec.num_layers:
        raise ShapeError("student and teacher differ in hidden size or depth")
    if student.spec.attention_dim > teacher.spec.attention_dim or student.spec.inner_dim > teacher.spec.inner_dim:
        raise ShapeError("student is wider than teacher")
    src = teacher.matrices()
    a, f = student.spec.attention_dim, student.spec.inner_dim
    with torch.no_grad():
        for name, module in student.matrices().items():
            if module.is_pair or src[name].is_pair:
                raise ConfigurationError(f"'{name}' must be a single branch to slice from")
            w, bias = src[name].branches[0], getattr(src[name], "bias", None)
            matrix = name.partition(".")[2]
            if matrix in ("query", "key", "value"):
                w, bias = w[:a], bias[:a]
            elif matrix == "attn_out":
                w = w[:, :a]
            elif matrix == "ffn_mid":
                w, bias = w[:f], bias[:f]
            elif matrix == "ffn_out":
                w = w[:, :f]
            module.branches[0].copy_(w)
            if bias is not None:
                module.bias.copy_(bias)
        for s_layer, t_layer in zip(student.layers, teacher.layers):
            s_layer.attention.norm.load_state_dict(t_layer.attention.norm.state_dict())
            s_layer.ffn.norm.load_state_dict(t_layer.ffn.norm.state_dict())
        student.embedding.norm.load_state_dict(teacher.embedding.norm.state_dict())
        student.classifier.load_state_dict(teacher.classifier.state_dict())
    return student


# Checkpoint container
def _packed_branch(module: nn.Module, index: int) -> dict[str, np.ndarray]:
    w = module.branches[index].detach()
    granularity = module.scheme.granularity
    if module.scheme.kind == "ternary":
        result = ternarize(w, granularity)
        return {
            "signs": np.packbits((w >= 0).numpy().reshape(-1)),
            "mask": np.packbits(result.support.numpy().reshape(-1)),
            "scales": result.alpha.reshape(-1).numpy().astype("<f4"),
        }
    result = binarize(w, granularity, module.scale_rule)
    return {
        "signs": np.packbits((w >= 0).numpy().reshape(-1)),
        "scales": result.alpha.reshape(-1).numpy().astype("<f4"),
    }


def encode_checkpoint(model: QuantBert, stage: str) -> bytes:
    """
    Magic, version and header length (little-endian uint32), a JSON header, then raw
    float32 parameter blocks, then packed sign bits, support masks and scales of every
    ternary or binary branch.
    """
    blocks: list[bytes] = []
    offset = 0

    def append(raw: bytes) -> tuple[int, int]:
        nonlocal offset
        blocks.append(raw)
        start, offset = offset, offset + len(raw)
        return start, len(raw)

    tensors = []
    for name, tensor in model.state_dict().items():
        start, size = append(tensor.detach().numpy().astype("<f4").tobytes())
        tensors.append({
            "name": name,
            "shape": list(tensor.shape),
            "dtype": str(tensor.dtype).replace("torch.", ""),
            "offset": start,
            "nbytes": size,
        })

    packed = []
    for name, module in model.matrices().items():
        if module.scheme.kind not in ("ternary", "binary"):
            continue
        for index in range(len(module.branches)):
            entry = {"name": f"{name}.branches.{index}", "kind": module.scheme.kind}
            for key, array in _packed_branch(module, index).items():
                entry[f"{key}_offset"], entry[f"{key}_nbytes"] = append(array.tobytes())
            packed.append(entry)

    header = {
        "format": "bitsplit-checkpoint",
        "stage": stage,
        "spec": model.spec.model_dump(mode="json"),
        "quant": model.quant.model_dump(mode="json"),
        "dropout": model.dropout_p,
        "precision": {name: scheme.label() for name, scheme in model.precision.items()},
        "branches": {name: len(module.branches) for name, module in model.matrices().items()},
        "tensors": tensors,
        "packed": packed,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    prefix = struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes))
    return prefix + header_bytes + b"".join(blocks)


def read_checkpoint_header(data: bytes) -> tuple[dict, int]:
    """Header dict and the byte offset where the data blocks start."""
    prefix_size = struct.calcsize("<4sII")
    if len(data) < prefix_size:
        raise CheckpointFormatError("truncated prefix")
    magic, version, header_len = struct.unpack_from("<4sII", data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}")
    try:
        header = json.loads(data[prefix_size:prefix_size + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from exc
    return header, prefix_size + header_len


def decode_checkpoint(data: bytes) -> tuple[QuantBert, str]:
    """Rebuild the model (parameters rounded to float32) and return it with its stage tag."""
    header, base = read_checkpoint_header(data)
    spec = ModelSpec.model_validate(header["spec"])
    precision = {name: QuantScheme.parse(label) for name, label in header["precision"].items()}
    model = build(spec, precision, QuantConfig.model_validate(header["quant"]), header["dropout"])
    for name, module in model.matrices().items():
        count = header["branches"][name]
        if count != len(module.branches):
            module.set_branches([module.branches[0]] * count)

    state = {}
    for entry in header["tensors"]:
        end = base + entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CheckpointFormatError(f"block '{entry['name']}' runs past the end of the file")
        array = np.frombuffer(data, dtype="<f4", count=entry["nbytes"] // 4, offset=base + entry["offset"])
        tensor = torch.from_numpy(array.astype(np.float64)).reshape(entry["shape"])
        state[entry["name"]] = tensor.bool() if entry["dtype"] == "bool" else tensor.to(torch.get_default_dtype())
    model.load_state_dict(state)
    return model, header["stage"]


def packed_weight_bytes(data: bytes) -> int:
    """Bytes used by packed signs, masks and scales: the deployable quantized payload."""
    header, _ = read_checkpoint_header(data)
    return sum(v for entry in header["packed"] for k, v in entry.items() if k.endswith("_nbytes"))
