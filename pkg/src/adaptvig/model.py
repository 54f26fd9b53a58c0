"""Four-stage hybrid backbone: conv stem, IRB + AGC stages, attention last stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .agc import AGCConfig, GatingParams, agc_forward, scaffold_shifts
from .attention import AttentionParams, attention_mix
from .layers import Conv, ConvBlock, count_parameters, trunc_normal, zeros
from .tensor import Tensor

DEFAULT_K = (8, 4, 2)
REPORTED_PARAMS_M = {"S": 8.6, "M": 17.9, "B": 26.8}


# --------------------------------------------------------------------------
# configuration


@dataclass
class StageConfig:
    irb_count: int
    mixer_count: int
    channels: int
    mixer: str = "agc"
    k: int | None = None

    def __post_init__(self):
        if self.mixer not in ("agc", "attention"):
            raise ValueError(f"mixer must be 'agc' or 'attention', got {self.mixer!r}")
        if self.irb_count < 0 or self.mixer_count < 0 or self.channels < 1:
            raise ValueError("stage counts must be >= 0 and channels >= 1")
        if self.mixer == "agc" and self.mixer_count and (self.k is None or self.k < 1):
            raise ValueError("AGC stages need a local distance k >= 1")


@dataclass
class ModelConfig:
    stages: list[StageConfig]
    stem_channels: int
    num_classes: int = 1000
    ffn_ratio: float = 4.0
    irb_expansion: float = 4.0
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        self.validate()

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ValueError(f"expected 4 stages, got {len(self.stages)}")
        for i, s in enumerate(self.stages):
            if s.mixer == "attention" and i != 3:
                raise ValueError(f"attention mixer only allowed in the last stage (stage {i + 1})")
        if self.stages[3].mixer != "attention":
            raise ValueError("stage 4 must use the attention mixer")
        widths = [s.channels for s in self.stages]
        if any(b < a for a, b in zip(widths, widths[1:])):
            raise ValueError(f"stage channels must be nondecreasing, got {widths}")
        if self.stem_channels != widths[0] and self.stages[0].irb_count == 0:
            raise ValueError("stem width differs from stage 1 width but stage 1 has no IRB to adapt it")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.stem_channels < 2 or self.ffn_ratio <= 0 or self.irb_expansion <= 0:
            raise ValueError("stem_channels >= 2 and positive ffn_ratio / irb_expansion required")

    @property
    def k_schedule(self) -> list[int | None]:
        return [s.k for s in self.stages[:3]]

    def stage_resolutions(self, h: int, w: int) -> list[tuple[int, int]]:
        """Spatial size seen by each stage for an h x w input."""
        if h < 4 or w < 4:
            raise ValueError(f"input {h}x{w} is smaller than the 4x4 stem minimum")
        h, w = _half(_half(h)), _half(_half(w))
        out = [(h, w)]
        for _ in range(3):
            h, w = _half(h), _half(w)
            out.append((h, w))
        return out

    def check_input(self, h: int, w: int) -> None:
        for i, ((sh, sw), s) in enumerate(zip(self.stage_resolutions(h, w), self.stages)):
            if s.mixer == "agc" and s.mixer_count:
                try:
                    scaffold_shifts(sh, sw, s.k)
                except ValueError as e:
                    raise ValueError(f"stage {i + 1} at {sh}x{sw}: {e}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_json(Path(path).read_text())


def _half(n: int) -> int:
    # 3x3, stride 2, padding 1
    return (n - 1) // 2 + 1


def _preset(depths, irbs, widths, num_classes: int) -> ModelConfig:
    stages = [
        StageConfig(irbs[i], depths[i], widths[i], "agc" if i < 3 else "attention", DEFAULT_K[i] if i < 3 else None)
        for i in range(4)
    ]
    return ModelConfig(stages, stem_channels=widths[0], num_classes=num_classes)


def adaptvig_s(num_classes: int = 1000) -> ModelConfig:
    return _preset([3, 3, 3, 3], [3, 3, 9, 3], [32, 64, 128, 256], num_classes)


def adaptvig_m(num_classes: int = 1000) -> ModelConfig:
    return _preset([4, 4, 4, 4], [4, 4, 12, 4], [48, 96, 192, 320], num_classes)


def adaptvig_b(num_classes: int = 1000) -> ModelConfig:
    return _preset([5, 5, 5, 5], [5, 5, 15, 5], [48, 96, 192, 384], num_classes)


PRESETS = {"S": adaptvig_s, "M": adaptvig_m, "B": adaptvig_b}


def toy_config(num_classes: int = 2, seed: int = 0) -> ModelConfig:
    """Desk-scale config for 3x16x16 inputs (stage resolutions 4,2,1,1).

    Stage 1 uses K=1: at 4x4 a K of 2 would coincide with the gated offset
    2 (offset 4 wraps to the identity), leaving T without a gradient.
    Stage 3 runs at 1x1 where no local distance K is valid, so it keeps
    only its IRB.
    """
    return ModelConfig(
        stages=[
            StageConfig(1, 1, 16, "agc", 1),
            StageConfig(1, 1, 24, "agc", 1),
            StageConfig(1, 0, 32, "agc", 1),
            StageConfig(1, 1, 32, "attention"),
        ],
        stem_channels=16,
        num_classes=num_classes,
        ffn_ratio=2.0,
        irb_expansion=2.0,
        seed=seed,
    )


# --------------------------------------------------------------------------
# blocks


@dataclass
class StemParams:
    first: ConvBlock
    second: ConvBlock


def init_stem(rng, c_in: int, c_out: int) -> StemParams:
    mid = max(1, c_out // 2)
    return StemParams(ConvBlock.init(rng, c_in, mid, 3, 2), ConvBlock.init(rng, mid, c_out, 3, 2))


def stem_forward(x: Tensor, p: StemParams) -> Tensor:
    T.check_nchw(x)
    if min(x.shape[2:]) < 4:
        raise ValueError(f"stem needs at least 4x4 input, got {x.shape[2:]}")
    return p.second(p.first(x))


@dataclass
class IRBParams:
    expand: ConvBlock
    dw: ConvBlock
    project: ConvBlock

    @property
    def hidden(self) -> int:
        return self.expand.conv.weight.shape[0]


def init_irb(rng, c_in: int, c_out: int, expansion: float) -> IRBParams:
    hid = max(1, round(c_in * expansion))
    return IRBParams(
        ConvBlock.init(rng, c_in, hid, 1),
        ConvBlock.init(rng, hid, hid, 3, depthwise=True),
        ConvBlock.init(rng, hid, c_out, 1, act=False),
    )


def irb_forward(x: Tensor, p: IRBParams) -> Tensor:
    y = p.project(p.dw(p.expand(x)))
    return x + y if y.shape == x.shape else y


@dataclass
class CPEParams:
    conv: Conv


def init_cpe(rng, c: int) -> CPEParams:
    return CPEParams(Conv.init(rng, c, c, 3, depthwise=True))


def cpe_forward(x: Tensor, p: CPEParams) -> Tensor:
    return x + p.conv(x)


@dataclass
class FFNParams:
    fc1: Conv
    fc2: Conv

    @property
    def hidden(self) -> int:
        return self.fc1.weight.shape[0]


def init_ffn(rng, c: int, ratio: float) -> FFNParams:
    hid = max(1, round(c * ratio))
    return FFNParams(Conv.init(rng, c, hid), Conv.init(rng, hid, c))


def ffn_forward(x: Tensor, p: FFNParams) -> Tensor:
    return x + p.fc2(T.gelu(p.fc1(x)))


@dataclass
class AGCBlockParams:
    cpe: CPEParams
    pre: Conv
    proj: ConvBlock
    gating: GatingParams
    ffn: FFNParams
    cfg: AGCConfig = field(default_factory=AGCConfig)


def init_agc_block(rng, c: int, k: int, ffn_ratio: float, gate_kind="exp_decay", distance_kind="L1") -> AGCBlockParams:
    return AGCBlockParams(
        cpe=init_cpe(rng, c),
        pre=Conv.init(rng, c, c),
        proj=ConvBlock.init(rng, 2 * c, c),
        gating=GatingParams(),
        ffn=init_ffn(rng, c, ffn_ratio),
        cfg=AGCConfig(k, gate_kind, distance_kind),
    )


def agc_block_forward(x: Tensor, p: AGCBlockParams) -> Tensor:
    x = cpe_forward(x, p.cpe)
    x = x + agc_forward(p.pre(x), p.cfg, p.gating, p.proj)
    return ffn_forward(x, p.ffn)


@dataclass
class AttentionBlockParams:
    cpe: CPEParams
    pre: Conv
    attn: AttentionParams
    ffn: FFNParams


def init_attention_block(rng, c: int, ffn_ratio: float) -> AttentionBlockParams:
    return AttentionBlockParams(init_cpe(rng, c), Conv.init(rng, c, c), AttentionParams.init(rng, c), init_ffn(rng, c, ffn_ratio))


def attention_block_forward(x: Tensor, p: AttentionBlockParams) -> Tensor:
    x = cpe_forward(x, p.cpe)
    x = x + attention_mix(p.pre(x), p.attn)
    return ffn_forward(x, p.ffn)


def init_downsample(rng, c_in: int, c_out: int) -> ConvBlock:
    return ConvBlock.init(rng, c_in, c_out, 3, 2, act=False)


def downsample_forward(x: Tensor, p: ConvBlock) -> Tensor:
    return p(x)


@dataclass
class HeadParams:
    weight: Tensor
    bias: Tensor


@dataclass
class StageParams:
    irbs: list[IRBParams]
    blocks: list


@dataclass
class ModelParams:
    stem: StemParams
    stages: list[StageParams]
    downsamples: list[ConvBlock]
    head: HeadParams

    def gatings(self) -> list[GatingParams]:
        return [b.gating for s in self.stages for b in s.blocks if isinstance(b, AGCBlockParams)]


def init_model(config: ModelConfig, seed: int | None = None) -> ModelParams:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    stem = init_stem(rng, config.in_channels, config.stem_channels)
    stages, downs = [], []
    for i, s in enumerate(config.stages):
        c_in = config.stem_channels if i == 0 else s.channels
        irbs = [init_irb(rng, c_in if j == 0 else s.channels, s.channels, config.irb_expansion) for j in range(s.irb_count)]
        if s.mixer == "agc":
            blocks = [init_agc_block(rng, s.channels, s.k, config.ffn_ratio) for _ in range(s.mixer_count)]
        else:
            blocks = [init_attention_block(rng, s.channels, config.ffn_ratio) for _ in range(s.mixer_count)]
        stages.append(StageParams(irbs, blocks))
        if i < 3:
            downs.append(init_downsample(rng, s.channels, config.stages[i + 1].channels))
    c_last = config.stages[-1].channels
    head = HeadParams(trunc_normal(rng, (config.num_classes, c_last)), zeros((config.num_classes,)))
    return ModelParams(stem, stages, downs, head)


def stage_forward(x: Tensor, p: StageParams) -> Tensor:
    for irb in p.irbs:
        x = irb_forward(x, irb)
    for b in p.blocks:
        x = agc_block_forward(x, b) if isinstance(b, AGCBlockParams) else attention_block_forward(x, b)
    return x


def features_forward(x: Tensor, config: ModelConfig, params: ModelParams) -> Tensor:
    config.check_input(*x.shape[2:])
    x = stem_forward(x, params.stem)
    for i, stage in enumerate(params.stages):
        x = stage_forward(x, stage)
        if i < 3:
            x = downsample_forward(x, params.downsamples[i])
    return x


def model_forward(x: Tensor, config: ModelConfig, params: ModelParams) -> Tensor:
    feats = features_forward(x, config, params)
    return T.head_primitives(feats, params.head.weight, params.head.bias)


# --------------------------------------------------------------------------
# parameter accounting


def _conv(ci: int, co: int, k: int) -> int:
    return co * ci * k * k + co


def _dw(c: int, k: int) -> int:
    return c * k * k + c


def _block(conv: int, c: int) -> int:
    return conv + 2 * c


def _irb(ci: int, co: int, e: float) -> int:
    hid = max(1, round(ci * e))
    return _block(_conv(ci, hid, 1), hid) + _block(_dw(hid, 3), hid) + _block(_conv(hid, co, 1), co)


def _ffn(c: int, r: float) -> int:
    hid = max(1, round(c * r))
    return _conv(c, hid, 1) + _conv(hid, c, 1)


def _mixer_block(c: int, kind: str, ffn_ratio: float) -> int:
    shared = _dw(c, 3) + _conv(c, c, 1) + _block(_conv(2 * c, c, 1), c) + _ffn(c, ffn_ratio)
    if kind == "agc":
        return shared + 1
    return shared + 3 * _conv(c, c, 1) + 3 * c


def param_count(config: ModelConfig) -> int:
    """Learnable scalars of ``init_model(config)``, computed without allocating."""
    mid = max(1, config.stem_channels // 2)
    total = _block(_conv(config.in_channels, mid, 3), mid) + _block(_conv(mid, config.stem_channels, 3), config.stem_channels)
    for i, s in enumerate(config.stages):
        c_in = config.stem_channels if i == 0 else s.channels
        for j in range(s.irb_count):
            total += _irb(c_in if j == 0 else s.channels, s.channels, config.irb_expansion)
        total += s.mixer_count * _mixer_block(s.channels, s.mixer, config.ffn_ratio)
        if i < 3:
            total += _block(_conv(s.channels, config.stages[i + 1].channels, 3), config.stages[i + 1].channels)
    return total + config.stages[-1].channels * config.num_classes + config.num_classes


def instantiated_count(params: ModelParams) -> int:
    return count_parameters(params)
