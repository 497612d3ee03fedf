import math
from typing import Dict, List, Optional, Tuple

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from utils.enum import LambdaSchedule, StudyMode

BANDWIDTH_MULTIPLIERS: Tuple[float, ...] = (
    0.25,
    1.0 / math.sqrt(2.0),
    1.0,
    math.sqrt(2.0),
    2.0,
)

RATIO_GRID: Tuple[str, ...] = ("0.5/0.5", "0.6/0.4", "0.7/0.3")

METRIC_NAMES: Tuple[str, ...] = ("dice", "precision", "recall", "hd", "hd95", "asd")


class SiteParams(BaseModel):
    """Intensity transform that distinguishes one acquisition site from another"""

    model_config = ConfigDict(extra="forbid")

    intensity_gain: float = Field(1.0, gt=0, description="Multiplicative gain")
    intensity_offset: float = Field(0.0, description="Additive offset")
    noise_sigma: float = Field(0.0, ge=0, description="Std of additive Gaussian noise")
    blur_sigma: float = Field(0.0, ge=0, description="Gaussian blur sigma in voxels")


class CropBox(BaseModel):
    """Axis-aligned voxel box, (z, y, x) order"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    origin: Tuple[int, int, int] = Field(..., description="First voxel index per axis")
    size: Tuple[int, int, int] = Field(..., description="Voxel count per axis")

    @field_validator("origin")
    @classmethod
    def _origin_non_negative(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(v < 0 for v in value):
            raise ValueError("origin indices must be >= 0")
        return value

    @field_validator("size")
    @classmethod
    def _size_positive(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(v < 1 for v in value):
            raise ValueError("box size must be >= 1 along every axis")
        return value


class ModelConfig(BaseModel):
    """Scale parameters of the CNN + ViT encoder-decoder.

    Three 2x poolings followed by non-overlapping p-voxel patches must tile the
    input cube exactly, so ``input_side`` is a multiple of ``8 * patch_side``.
    """

    model_config = ConfigDict(extra="forbid")

    input_side: int = Field(48, ge=8, description="Cube side S in voxels")
    base_channels: int = Field(4, ge=1, description="Channels c of the first encoder stage")
    embed_dim: int = Field(32, ge=16, description="Token dimension d")
    num_heads: int = Field(4, ge=1, description="Attention heads h")
    num_blocks: int = Field(2, ge=1, description="Transformer blocks L")
    mlp_hidden: int = Field(64, ge=1, description="Hidden width of the transformer MLP")
    patch_side: int = Field(2, ge=1, description="Patch side p on the bottleneck grid")
    num_classes: int = Field(2, ge=2, description="Output classes K")

    @model_validator(mode="after")
    def _check_shape_laws(self) -> "ModelConfig":
        if self.input_side % (8 * self.patch_side) != 0:
            raise ValueError(
                f"input_side {self.input_side} must be divisible by "
                f"8 * patch_side = {8 * self.patch_side}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} must be divisible by num_heads {self.num_heads}"
            )
        if self.embed_dim % 16 != 0:
            raise ValueError("embed_dim must be divisible by 16 (decoder uses d/4, d/8, d/16)")
        return self

    @classmethod
    def full_size(cls) -> "ModelConfig":
        """Full-size instance: 192^3 input, 512-d tokens, six blocks."""
        return cls(
            input_side=192,
            base_channels=32,
            embed_dim=512,
            num_heads=8,
            num_blocks=6,
            mlp_hidden=2048,
            patch_side=8,
        )

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls(
            input_side=64,
            base_channels=8,
            embed_dim=64,
            num_heads=4,
            num_blocks=2,
            mlp_hidden=128,
            patch_side=2,
        )

    @classmethod
    def tiny(cls) -> "ModelConfig":
        return cls(
            input_side=16,
            base_channels=2,
            embed_dim=16,
            num_heads=2,
            num_blocks=1,
            mlp_hidden=32,
            patch_side=2,
        )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def bottleneck_side(self) -> int:
        return self.input_side // 8

    @property
    def token_grid(self) -> int:
        return self.bottleneck_side // self.patch_side

    @property
    def num_tokens(self) -> int:
        return self.token_grid**3

    @property
    def encoder_channels(self) -> Tuple[int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 4 * c)

    @property
    def decoder_channels(self) -> Tuple[int, int, int]:
        d = self.embed_dim
        return (d // 4, d // 8, d // 16)

    @property
    def domain_head_widths(self) -> Tuple[int, int, int, int]:
        d = self.embed_dim
        return (d, d // 4, d // 8, 2)

    def stage_shape(self, stage: str) -> Tuple[int, int, int, int]:
        """Per-sample (C, D, H, W) of a named feature stage."""
        s = self.input_side
        c1, c2, c3 = self.encoder_channels
        k1, k2, k3 = self.decoder_channels
        shapes = {
            "enc1": (c1, s // 2, s // 2, s // 2),
            "enc2": (c2, s // 4, s // 4, s // 4),
            "enc3": (c3, s // 8, s // 8, s // 8),
            "vit_out": (self.embed_dim, s // 8, s // 8, s // 8),
            "dec1": (k1, s // 4, s // 4, s // 4),
            "dec2": (k2, s // 2, s // 2, s // 2),
            "dec3": (k3, s, s, s),
        }
        return shapes[str(getattr(stage, "value", stage))]


class LossWeights(BaseModel):
    """Weights of the segmentation mixture and of the adaptation terms"""

    model_config = ConfigDict(extra="forbid")

    alpha_mix: float = Field(0.4, ge=0.3, le=0.5, description="Focal share of the seg loss")
    alpha_balance: float = Field(0.25, ge=0.0, le=1.0, description="Focal class balance")
    gamma: float = Field(2.0, ge=0.0, description="Focal focusing exponent")
    alpha_adv: float = Field(0.1, ge=0.0, description="Adversarial loss weight")
    beta_mmd: float = Field(0.1, ge=0.0, description="MMD^2 weight")

    def for_study(self, mode: StudyMode) -> "LossWeights":
        """Weights with the terms inactive under ``mode`` set to zero."""
        mode = StudyMode(mode)
        return self.model_copy(
            update={
                "alpha_adv": self.alpha_adv if mode.uses_grl else 0.0,
                "beta_mmd": self.beta_mmd if mode.uses_mmd else 0.0,
            }
        )


class AdaptationConfig(BaseModel):
    """Gradient-reversal and kernel settings of the domain-adaptation block"""

    model_config = ConfigDict(extra="forbid")

    study_mode: StudyMode = Field(StudyMode.GRL_MMD, description="Which DA terms are active")
    grl_lambda: float = Field(1.0, ge=0.0, description="Gradient reversal strength (max)")
    lambda_schedule: LambdaSchedule = Field(
        LambdaSchedule.CONSTANT, description="constant or ramp warm-up"
    )
    fixed_sigma: Optional[float] = Field(
        None, gt=0, description="Base kernel bandwidth; None uses the median heuristic"
    )
    head_dropout: float = Field(0.2, ge=0.0, lt=1.0, description="Domain head dropout")

    def lambda_at(self, progress: float) -> float:
        """Reversal strength at training progress ``t/T`` in [0, 1]."""
        if self.lambda_schedule == LambdaSchedule.CONSTANT:
            return self.grl_lambda
        progress = min(max(progress, 0.0), 1.0)
        return self.grl_lambda * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


class KernelBandwidths(BaseModel):
    model_config = ConfigDict(frozen=True)

    base_sigma: float = Field(..., gt=0)
    sigmas: Tuple[float, ...] = Field(..., min_length=1)

    @field_validator("sigmas")
    @classmethod
    def _positive(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if any(not (s > 0 and math.isfinite(s)) for s in value):
            raise ValueError("kernel bandwidths must be finite and > 0")
        return value

    @classmethod
    def from_base(cls, base_sigma: float) -> "KernelBandwidths":
        return cls(
            base_sigma=base_sigma,
            sigmas=tuple(base_sigma * m for m in BANDWIDTH_MULTIPLIERS),
        )


class PhantomSpec(BaseModel):
    """Synthetic two-site dataset recipe"""

    model_config = ConfigDict(extra="forbid")

    n_train: int = Field(40, ge=1, description="Training cases per site")
    n_val: int = Field(20, ge=1, description="Validation cases per site")
    side: int = Field(48, ge=16, description="Generated cube side")
    seed: int = Field(0, description="Base seed; case seeds derive from it")
    source_site: SiteParams = Field(default_factory=SiteParams)
    target_site: SiteParams = Field(
        default_factory=lambda: SiteParams(
            intensity_gain=1.3, intensity_offset=50.0, noise_sigma=5.0, blur_sigma=1.0
        )
    )


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(20, ge=1)
    batch_size: int = Field(2, ge=1, description="Samples per domain per batch")
    lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    grad_clip: Optional[float] = Field(5.0, gt=0, description="Global norm; None disables")
    seed: int = Field(0)
    dtype: str = Field("float32", pattern="^(float32|float64)$")
    device: str = Field("cpu")
    supervise_target: bool = Field(False, description="Also supervise target labels")
    zscore: bool = Field(False, description="Per-volume z-scoring of inputs")
    patience: Optional[int] = Field(None, ge=1, description="Early-stopping patience (epochs)")
    num_workers: int = Field(0, ge=0)
    prefetch: int = Field(2, ge=1, description="Batches prefetched per loader worker")


class ExperimentConfig(BaseModel):
    """Everything one run needs; ``ratio`` fixes the DiceCE/Focal split."""

    model_config = ConfigDict(extra="forbid")

    name: str = Field("run", description="Run label")
    data_root: Optional[str] = Field(None, description="On-disk dataset; None generates phantoms")
    source_site_name: str = Field("source")
    target_site_name: str = Field("target")
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    adaptation: AdaptationConfig = Field(default_factory=AdaptationConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    ratio: str = Field("0.6/0.4", description="DiceCE/Focal weighting")
    output_dir: str = Field("./runs/run")

    @field_validator("ratio")
    @classmethod
    def _check_ratio(cls, value: str) -> str:
        parts = value.replace(" ", "").split("/")
        if len(parts) != 2:
            raise ValueError(f"ratio must look like '0.6/0.4', got '{value}'")
        try:
            dice_ce, focal = (float(p) for p in parts)
        except ValueError as err:
            raise ValueError(f"ratio components must be numbers, got '{value}'") from err
        if abs(dice_ce + focal - 1.0) > 1e-9:
            raise ValueError(f"ratio components must sum to 1, got {dice_ce + focal:g}")
        canonical = f"{dice_ce:.1f}/{focal:.1f}"
        if canonical not in RATIO_GRID:
            raise ValueError(f"ratio {canonical} is not one of {', '.join(RATIO_GRID)}")
        return canonical

    @model_validator(mode="after")
    def _sync_and_check(self) -> "ExperimentConfig":
        focal_share = float(self.ratio.split("/")[1])
        if self.loss.alpha_mix != focal_share:
            self.loss = self.loss.model_copy(update={"alpha_mix": focal_share})
        if self.adaptation.study_mode.uses_mmd and self.training.batch_size < 2:
            raise ValueError("training.batch_size must be >= 2 per domain when MMD is active")
        return self

    @property
    def alpha_mix(self) -> float:
        return self.loss.alpha_mix

    @property
    def effective_weights(self) -> LossWeights:
        return self.loss.for_study(self.adaptation.study_mode)


class LossBreakdown(BaseModel):
    """Itemized losses of one training step"""

    step: int
    seg: float
    adv: float
    mmd2: float
    total: float
    domain_acc: float = Field(math.nan, description="Domain head batch accuracy (NaN if unused)")
    grl_lambda: float = 0.0

    @property
    def mmd2_display(self) -> float:
        return max(0.0, self.mmd2)


class CaseMetrics(BaseModel):
    """Per-case overlap and surface-distance metrics (fractions, millimeters)"""

    case_id: str
    site: str = ""
    dice: float
    precision: float
    recall: float
    hd: float
    hd95: float
    asd: float
    flags: List[str] = Field(default_factory=list)


class MetricsReport(BaseModel):
    """Per-case metrics plus cohort means"""

    cases: List[CaseMetrics] = Field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for case in self.cases:
            row = case.model_dump()
            row["flags"] = ";".join(case.flags)
            rows.append(row)
        columns = ["case_id", "site", *METRIC_NAMES, "flags"]
        return pd.DataFrame(rows, columns=columns)

    def summary(self) -> Dict[str, float]:
        """NaN-skipping means of the six metrics."""
        frame = self.to_frame()
        if frame.empty:
            return {name: math.nan for name in METRIC_NAMES}
        return {name: float(frame[name].mean(skipna=True)) for name in METRIC_NAMES}

    @property
    def mean_dice(self) -> float:
        return self.summary()["dice"]


class MaskFeatures(BaseModel):
    voxel_volume: float = Field(..., description="mm^3")
    surface_area: float = Field(..., description="mm^2")
    sphericity: float
    energy: float


class OverlapMetrics(BaseModel):
    dice: float
    precision: float
    recall: float
    flags: List[str] = Field(default_factory=list)


class TTestResult(BaseModel):
    t: float
    p: float
    df: int
