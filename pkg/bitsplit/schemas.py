"""
Pydantic schemas for experiment configuration, reports and run manifests.
"""
import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from bitsplit.exceptions import ConfigurationError

SchemeKind = Literal["full", "ternary", "binary", "uniform"]
Granularity = Literal["matrix", "row"]

_DEFAULT_BITS = {"full": 32, "ternary": 2, "binary": 1}


# Quantization Schemas
class QuantScheme(BaseModel):
    """Weight quantization scheme of one matrix."""
    model_config = ConfigDict(frozen=True)

    kind: SchemeKind = Field(..., description="full, ternary, binary or uniform k-bit")
    granularity: Granularity = Field("matrix", description="One scale per matrix or per row")
    bits: int = Field(32, ge=1, le=32, description="Storage bits per weight")

    @model_validator(mode="before")
    @classmethod
    def fill_bits(cls, data):
        """Infer bits from the kind when omitted."""
        if isinstance(data, dict) and "bits" not in data and data.get("kind") in _DEFAULT_BITS:
            data = {**data, "bits": _DEFAULT_BITS[data["kind"]]}
        return data

    @model_validator(mode="after")
    def check_bits(self):
        """Ternary is 2-bit, binary 1-bit, full 32-bit; uniform needs at least 2 bits."""
        expected = _DEFAULT_BITS.get(self.kind)
        if expected is not None and self.bits != expected:
            raise ValueError(f"{self.kind} scheme must use {expected} bits, got {self.bits}")
        if self.kind == "uniform" and not 2 <= self.bits <= 16:
            raise ValueError(f"uniform scheme needs 2..16 bits, got {self.bits}")
        return self

    @property
    def quantized(self) -> bool:
        return self.kind != "full"

    @classmethod
    def full(cls) -> "QuantScheme":
        return cls(kind="full")

    @classmethod
    def ternary(cls, granularity: Granularity = "matrix") -> "QuantScheme":
        return cls(kind="ternary", granularity=granularity)

    @classmethod
    def binary(cls, granularity: Granularity = "matrix") -> "QuantScheme":
        return cls(kind="binary", granularity=granularity)

    @classmethod
    def uniform(cls, bits: int, granularity: Granularity = "matrix") -> "QuantScheme":
        return cls(kind="uniform", bits=bits, granularity=granularity)

    @classmethod
    def from_bits(cls, bits: int, granularity: Granularity = "matrix") -> "QuantScheme":
        """Map a bit-width to its scheme: 32 full, 2 ternary, 1 binary, otherwise uniform."""
        if bits >= 32:
            return cls.full()
        if bits == 2:
            return cls.ternary(granularity)
        if bits == 1:
            return cls.binary(granularity)
        return cls.uniform(bits, granularity)

    @classmethod
    def parse(cls, text: str) -> "QuantScheme":
        """Parse labels such as 'ternary', 'binary:row' or 'uniform-4'."""
        label, _, granularity = text.strip().partition(":")
        granularity = granularity or "matrix"
        try:
            if label.startswith("uniform-"):
                return cls.uniform(int(label.split("-", 1)[1]), granularity)
            return cls(kind=label, granularity=granularity)
        except (ValueError, ValidationError) as exc:
            raise ConfigurationError(f"Invalid quantization scheme '{text}': {exc}") from exc

    def label(self) -> str:
        base = f"uniform-{self.bits}" if self.kind == "uniform" else self.kind
        return base if self.granularity == "matrix" else f"{base}:{self.granularity}"


# Model Schemas
class ModelSpec(BaseModel):
    """Transformer architecture constants."""
    model_config = ConfigDict(frozen=True)

    num_layers: int = Field(4, ge=1, description="Transformer layers L")
    hidden: int = Field(128, ge=2, description="Hidden size H")
    heads: int = Field(4, ge=1, description="Attention heads A at width 1.0")
    ffn_dim: int = Field(512, ge=2, description="FFN inner size F at width 1.0")
    vocab: int = Field(1024, ge=8, description="Vocabulary size V")
    max_seq_len: int = Field(32, ge=2, description="Position table length")
    type_vocab: int = Field(2, ge=1, description="Token type table length")
    width: float = Field(1.0, description="Width multiplier for attention heads and FFN")
    num_classes: int = Field(2, ge=1, description="Classifier outputs")

    @field_validator("width")
    @classmethod
    def validate_width(cls, v):
        if v not in (0.5, 1.0):
            raise ValueError("width must be 0.5 or 1.0")
        return v

    @model_validator(mode="after")
    def check_divisibility(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} is not divisible by heads {self.heads}")
        if (self.heads * self.width) % 1 != 0 or self.heads * self.width < 1:
            raise ValueError(f"width {self.width} does not give an integral head count")
        if (self.ffn_dim * self.width) % 1 != 0:
            raise ValueError(f"width {self.width} does not give an integral FFN size")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def active_heads(self) -> int:
        return int(self.heads * self.width)

    @property
    def attention_dim(self) -> int:
        return self.active_heads * self.head_dim

    @property
    def inner_dim(self) -> int:
        return int(self.ffn_dim * self.width)

    @property
    def embedding_rows(self) -> int:
        return self.vocab + self.max_seq_len + self.type_vocab

    def at_width(self, width: float) -> "ModelSpec":
        return self.model_copy(update={"width": width})


class TrainConfig(BaseModel):
    """Optimizer, schedule and epoch settings. Learning rates are desk-scale (10x the BERT-scale values)."""
    batch_size: int = Field(32, ge=1)
    eval_batch_size: int = Field(128, ge=1)
    seq_len: int = Field(32, ge=4, description="Task sequence length including [CLS]/[SEP]")
    lr_teacher: float = Field(1e-3, gt=0)
    lr_int: float = Field(5e-4, gt=0, description="Stage 1, intermediate-layer distillation")
    lr_pred: float = Field(2e-4, gt=0, description="Stage 2, prediction-layer distillation")
    lr_split: float = Field(2e-4, gt=0, description="Stage 3, fine-tuning after the split")
    epochs_teacher: int = Field(6, ge=0)
    epochs_int: int = Field(6, ge=0)
    epochs_pred: int = Field(6, ge=0)
    epochs_split: int = Field(6, ge=0)
    warmup_portion: float = Field(0.1, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    max_grad_norm: float = Field(1.0, gt=0)
    dropout: float = Field(0.1, ge=0, lt=1)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-6, gt=0)

    @field_validator("warmup_portion")
    @classmethod
    def validate_warmup(cls, v):
        if v >= 1:
            raise ValueError("warmup portion must be below 1")
        return v


class QuantConfig(BaseModel):
    """Activation quantization and binarization settings."""
    activation_quantizer: Literal["minmax", "lsq"] = "minmax"
    activation_bits: int = Field(8, ge=1, le=32, description="32 disables activation quantization")
    scale_rule: Literal["mean", "ternary"] = Field("mean", description="Binary scale: mean |w| or the ternary scale")


class AdaptiveConfig(BaseModel):
    """Adaptive splitting settings."""
    strategy: Literal["maximal", "minimal", "random"] = "maximal"
    budget_bytes: Optional[int] = Field(None, ge=0, description="Extra bytes above the half-width binary model")
    scale_by_matrix_params: bool = False
    sensitivity_seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])


class TsvSchema(BaseModel):
    """Column layout of a TSV task file."""
    path: Path
    text_columns: list[str] = Field(..., min_length=1, max_length=2)
    label_column: str
    dev_fraction: float = Field(0.2, ge=0, lt=1)
    hash_buckets: int = Field(64, ge=0, description="Hash buckets for out-of-vocabulary words")


class TaskConfig(BaseModel):
    """Task selection: a synthetic kind or a TSV file."""
    kind: str = "majority-token-class"
    tsv: Optional[TsvSchema] = None
    train_size: int = Field(2000, ge=1)
    dev_size: int = Field(500, ge=0)
    num_classes: int = Field(2, ge=1)
    data_seed: int = 1234

    @field_validator("tsv")
    @classmethod
    def validate_tsv_path(cls, v):
        if v is not None and not v.path.is_file():
            raise ValueError(f"TSV file does not exist: {v.path}")
        return v


class ExperimentConfig(BaseModel):
    """Top-level experiment configuration loaded from JSON."""
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    quant: QuantConfig = Field(default_factory=QuantConfig)
    adaptive: AdaptiveConfig = Field(default_factory=AdaptiveConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    teacher_width: float = 1.0
    workers: int = Field(1, ge=1)

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v

    @field_validator("teacher_width")
    @classmethod
    def validate_teacher_width(cls, v):
        if v not in (0.5, 1.0):
            raise ValueError("teacher width must be 0.5 or 1.0")
        return v

    @model_validator(mode="after")
    def check_lengths(self):
        if self.train.seq_len > self.model.max_seq_len:
            raise ValueError(f"seq_len {self.train.seq_len} exceeds max_seq_len {self.model.max_seq_len}")
        if self.task.num_classes != self.model.num_classes:
            raise ValueError("task and model disagree on the number of classes")
        return self

    @classmethod
    def from_file(cls, path: Path) -> "ExperimentConfig":
        """Load and validate a JSON experiment file."""
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigurationError(f"Config file not found: {path}") from exc
        except ValidationError as exc:
            raise ConfigurationError(f"Invalid config {path}: {exc}") from exc

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# Report Schemas
class GainStat(BaseModel):
    """Mean and standard deviation of a measured gain over seeds."""
    mean: float
    std: float
    samples: list[float] = Field(default_factory=list)


class SensitivityReport(BaseModel):
    """Leave-one-out gains and the derived sensitivity vector."""
    baseline: GainStat = Field(..., description="Accuracy of the fully quantized baseline")
    part_gains: dict[str, GainStat]
    layer_gains: dict[int, GainStat]
    embedding_gain: GainStat
    pooler_gain: GainStat
    part_params: dict[str, int]
    layer_params: dict[int, int]
    embedding_params: int
    pooler_params: int
    matrix_names: list[str]
    u: list[float] = Field(..., description="Sensitivity per splittable matrix, aligned with matrix_names")

    @model_validator(mode="after")
    def check_alignment(self):
        if len(self.u) != len(self.matrix_names):
            raise ValueError("sensitivity vector and matrix names differ in length")
        return self


class SplitPlan(BaseModel):
    """Binary split assignment over splittable matrices."""
    strategy: str
    matrix_names: list[str]
    selection: list[int] = Field(..., description="1 = ternarize then split, 0 = binary")
    costs: list[int]
    budget: int = Field(..., ge=0, description="Extra bytes allowed above base_size")
    base_size: int = Field(..., ge=0, description="Size of the half-width all-binary model")
    value: float = 0.0

    @model_validator(mode="after")
    def check_plan(self):
        if not len(self.matrix_names) == len(self.selection) == len(self.costs):
            raise ValueError("plan vectors differ in length")
        if any(s not in (0, 1) for s in self.selection):
            raise ValueError("selection entries must be 0 or 1")
        if self.extra_cost > self.budget:
            raise ValueError(f"plan cost {self.extra_cost} exceeds budget {self.budget}")
        return self

    @property
    def extra_cost(self) -> int:
        return sum(c * s for c, s in zip(self.costs, self.selection))

    @property
    def selected(self) -> list[str]:
        return [name for name, s in zip(self.matrix_names, self.selection) if s]


# Manifest Schemas
class ArtifactInfo(BaseModel):
    """Stored artifact metadata."""
    key: str = Field(..., description="Artifact key within the run")
    size: int = Field(..., description="Size in bytes")
    etag: str = Field(..., description="MD5 checksum")


class RunManifest(BaseModel):
    """Everything needed to reproduce a run's artifacts."""
    command: str
    config_hash: str
    seeds: list[int]
    versions: dict[str, str]
    options: dict[str, str] = Field(default_factory=dict)
    artifacts: list[ArtifactInfo] = Field(default_factory=list)
