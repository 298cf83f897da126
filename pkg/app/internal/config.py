import configparser
from enum import Enum
from logging import getLogger
from typing import Annotated, Optional

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


log = getLogger("SSL")


class ConfigFileError(Exception):
    """Raised when an experiment configuration file or override cannot be applied

    Attributes:
        msg -- error message naming the section and key
    """

    def __init__(self, msg="invalid configuration"):
        self.msg = msg
        super().__init__(self.msg)


class ConvKind(str, Enum):
    standard = 'standard'
    lightweight = 'lightweight'
    dynamic = 'dynamic'


class ContextKind(str, Enum):
    transformer = 'transformer'
    conformer = 'conformer'


class EncoderGeometry(str, Enum):
    base = 'base'
    toy = 'toy'


class AugmentationConfig(BaseModel, validate_assignment=True):
    apply_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    snr_low: float = 10.0
    snr_high: float = 15.0
    pitch_sigma: float = Field(default=50.0, ge=0.0)
    room_sigma: float = Field(default=60.0, ge=0.0)
    noise_manifest: Optional[str] = None
    additive: bool = True
    pitch: bool = True
    reverb: bool = True

    @model_validator(mode="after")
    def check_snr_range(self):
        if self.snr_low > self.snr_high:
            raise ValueError(f"snr_low {self.snr_low} exceeds snr_high {self.snr_high}")
        return self


class ConvLayerSpec(BaseModel):
    kind: ConvKind = ConvKind.standard
    out_channels: int = Field(gt=0)
    kernel: int = Field(gt=0)
    stride: int = Field(gt=0)
    heads: int = Field(default=1, gt=0)
    group_size: Optional[int] = None
    dropout: float = Field(default=0.0, ge=0.0, lt=1.0)
    bias: bool = False
    # per-channel group norm (standard layers only)
    norm: bool = False

    model_config = ConfigDict(use_enum_values=True)

    @model_validator(mode="after")
    def check_divisibility(self):
        if self.kind == ConvKind.standard:
            if self.bias and self.norm:
                raise ValueError("a bias in front of group norm is cancelled by it, use bias or norm")
            return self
        if self.out_channels % self.heads:
            raise ValueError(f"out_channels {self.out_channels} not divisible by heads {self.heads}")
        if self.group_size is None:
            self.group_size = self.out_channels // self.heads
        if self.group_size <= 0 or self.out_channels % self.group_size:
            raise ValueError(f"group_size {self.group_size} does not divide out_channels {self.out_channels}")
        return self


class EncoderConfig(BaseModel):
    """A concrete conv stack; every layer ends in GELU."""
    layers: list[ConvLayerSpec]
    in_channels: int = 1

    @property
    def out_channels(self):
        return self.layers[-1].out_channels

    @property
    def total_stride(self):
        stride = 1
        for layer in self.layers:
            stride *= layer.stride
        return stride

    @property
    def receptive_field(self):
        field, jump = 1, 1
        for layer in self.layers:
            field += (layer.kernel - 1) * jump
            jump *= layer.stride
        return field

    def output_length(self, length):
        for layer in self.layers:
            if length < layer.kernel:
                return 0
            length = (length - layer.kernel) // layer.stride + 1
        return length


class EncoderSection(BaseModel, validate_assignment=True):
    geometry: EncoderGeometry = EncoderGeometry.base
    k_tail: int = Field(default=0, ge=0)
    tail_kind: ConvKind = ConvKind.lightweight
    tail_heads: int = Field(default=8, gt=0)
    tail_group_size: Optional[int] = None
    tail_dropout: float = Field(default=0.1, ge=0.0, lt=1.0)

    model_config = ConfigDict(use_enum_values=True)

    @field_validator("tail_kind")
    @classmethod
    def tail_is_replacement(cls, v):
        if v == ConvKind.standard:
            raise ValueError("tail_kind must be lightweight or dynamic")
        return v


class ContextConfig(BaseModel, validate_assignment=True):
    kind: ContextKind = ContextKind.transformer
    num_blocks: int = Field(default=12, ge=0)
    model_dim: int = Field(default=768, gt=0)
    num_heads: int = Field(default=12, gt=0)
    ffn_dim: Optional[int] = None
    depthwise_kernel: int = Field(default=31, gt=0)
    dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    pos_kernel: int = Field(default=128, gt=0)
    pos_groups: int = Field(default=16, gt=0)
    positional: bool = True

    model_config = ConfigDict(use_enum_values=True)

    @model_validator(mode="after")
    def check_dims(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.depthwise_kernel % 2 == 0:
            raise ValueError(f"depthwise_kernel {self.depthwise_kernel} must be odd")
        if self.model_dim % self.pos_groups:
            raise ValueError(f"model_dim {self.model_dim} not divisible by pos_groups {self.pos_groups}")
        if self.ffn_dim is None:
            self.__dict__["ffn_dim"] = 4 * self.model_dim
        return self


class QuantizerConfig(BaseModel, validate_assignment=True):
    num_groups: int = Field(default=2, ge=1)
    entries_per_group: int = Field(default=320, ge=2)
    target_dim: int = Field(default=256, gt=0)
    temperature_start: float = Field(default=2.0, gt=0.0)
    temperature_floor: float = Field(default=0.5, gt=0.0)
    temperature_decay: float = Field(default=0.999995, gt=0.0, le=1.0)
    diversity_weight: float = Field(default=0.1, ge=0.0)

    @model_validator(mode="after")
    def check_schedule(self):
        if self.temperature_floor > self.temperature_start:
            raise ValueError("temperature_floor exceeds temperature_start")
        if self.target_dim % self.num_groups:
            raise ValueError(f"target_dim {self.target_dim} not divisible by num_groups {self.num_groups}")
        return self

    @property
    def code_dim(self):
        return self.target_dim // self.num_groups


class MaskConfig(BaseModel, validate_assignment=True):
    mask_prob: float = Field(default=0.065, ge=0.0, le=1.0)
    span_len: int = Field(default=10, ge=1)


HEAD_DEPTHS = (0, 2, 3, 4)


def check_head_depth(v):
    if v not in HEAD_DEPTHS:
        raise ValueError(f"head depth {v} not in {HEAD_DEPTHS}")
    return v


HeadDepth = Annotated[int, AfterValidator(check_head_depth)]


class HeadConfig(BaseModel):
    """One projection head: `num_layers` hidden (linear, batchnorm, ReLU) layers then a linear output."""
    num_layers: HeadDepth = 0
    hidden_dim: int = Field(gt=0)
    output_dim: int = Field(gt=0)


class HeadsConfig(BaseModel, validate_assignment=True):
    layers: Optional[HeadDepth] = None
    context_layers: HeadDepth = 0
    target_layers: HeadDepth = 0
    hidden_dim: Optional[int] = None

    @model_validator(mode="after")
    def shared_depth(self):
        if self.layers is not None:
            self.__dict__["context_layers"] = self.layers
            self.__dict__["target_layers"] = self.layers
        return self

    def context_head(self, model_dim):
        return HeadConfig(num_layers=self.context_layers, hidden_dim=self.hidden_dim or model_dim, output_dim=model_dim)

    def target_head(self, model_dim):
        return HeadConfig(num_layers=self.target_layers, hidden_dim=self.hidden_dim or model_dim, output_dim=model_dim)


class ObjectiveConfig(BaseModel, validate_assignment=True):
    num_distractors: int = Field(default=100, ge=1)
    temperature: float = Field(default=0.1, gt=0.0)
    feature_dropout: float = Field(default=0.1, ge=0.0, lt=1.0)


class OptimizerConfig(BaseModel, validate_assignment=True):
    learning_rate: float = Field(default=5e-4, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.98, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-6, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    warmup_steps: Optional[int] = Field(default=None, ge=0)
    total_steps: int = Field(default=400000, ge=0)

    @model_validator(mode="after")
    def check_steps(self):
        if self.warmup_steps is None:
            self.__dict__["warmup_steps"] = self.total_steps // 10
        if self.warmup_steps > self.total_steps:
            raise ValueError(f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}")
        return self


class BatchConfig(BaseModel, validate_assignment=True):
    examples_per_batch: int = Field(default=8, ge=1)
    crop_samples: int = Field(default=250000, gt=0)


class DataConfig(BaseModel, validate_assignment=True):
    manifest: Optional[str] = None
    strict: bool = False


class TrainSection(BaseModel, validate_assignment=True):
    seed: int = 0
    deterministic: bool = False
    checkpoint_every: int = Field(default=1000, ge=1)
    output_dir: str = "runs/default"
    resume: Optional[str] = None


class ModelConfig(BaseModel):
    """Everything needed to build the network and its parameter store."""
    encoder: EncoderConfig
    context: ContextConfig
    quantizer: QuantizerConfig
    context_head: HeadConfig
    target_head: HeadConfig


class TrainConfig(BaseModel, validate_assignment=True):
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentationConfig = Field(default_factory=AugmentationConfig)
    encoder: EncoderSection = Field(default_factory=EncoderSection)
    context: ContextConfig = Field(default_factory=ContextConfig)
    quantizer: QuantizerConfig = Field(default_factory=QuantizerConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)
    heads: HeadsConfig = Field(default_factory=HeadsConfig)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch: BatchConfig = Field(default_factory=BatchConfig)
    train: TrainSection = Field(default_factory=TrainSection)


SECTIONS = tuple(TrainConfig.model_fields)


def parse_override(text):
    """`section.key=value` -> (section, key, value)."""
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigFileError(f"override '{text}' is not of the form section.key=value")
    return section, key, value.strip()


def load_config(path=None, overrides=(), text=None):
    """Read an INI experiment config (from `path` or `text`), apply `section.key=value` overrides, validate."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        if path is not None:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        elif text is not None:
            parser.read_string(text)
    except configparser.Error as e:
        raise ConfigFileError(f"{path or '<text>'}: {e}")

    raw = {section: {} for section in SECTIONS}
    for section in parser.sections():
        if section not in raw:
            raise ConfigFileError(f"{path}: unknown section [{section}]")
        raw[section].update(parser.items(section))

    for text in overrides:
        section, key, value = parse_override(text)
        if section not in raw:
            raise ConfigFileError(f"override '{text}': unknown section [{section}]")
        raw[section][key] = value

    for section, values in raw.items():
        known = TrainConfig.model_fields[section].annotation.model_fields
        for key in values:
            if key not in known:
                raise ConfigFileError(f"[{section}] unknown key '{key}'")
        # empty values mean "unset"
        raw[section] = {k: v for k, v in values.items() if v != ""}

    try:
        config = TrainConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigFileError(f"{path or '<defaults>'}: {e}")
    log.debug(f"loaded configuration from {path or '<defaults>'} with {len(overrides)} overrides")
    return config


def dump_config(config):
    """Render a TrainConfig back to INI text."""
    lines = []
    data = config.model_dump(mode="json")
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in data[section].items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
