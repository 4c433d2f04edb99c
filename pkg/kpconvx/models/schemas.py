from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator

# Kernel dispositions studied for KPConvX, keyed by total point count K
KNOWN_DISPOSITIONS: dict[int, list[int]] = {
    7: [1, 6],
    13: [1, 12],
    15: [1, 14],
    20: [1, 19],
    27: [1, 12, 14],
    29: [1, 28],
    32: [1, 12, 19],
    34: [1, 14, 19],
    41: [1, 12, 28],
    43: [1, 14, 28],
    48: [1, 19, 28],
    50: [1, 14, 35],
    55: [1, 19, 35],
    57: [1, 14, 42],
    62: [1, 19, 42],
}


def shells_for_k(k: int) -> list[int]:
    """Shell counts for a total of ``k`` kernel points (single shell when ``k`` is not a studied size)."""
    if k < 2:
        raise ValueError(f"A disposition needs at least 2 points, got K={k}")
    return list(KNOWN_DISPOSITIONS.get(k, [1, k - 1]))


def _check_shell_counts(counts: list[int]) -> list[int]:
    if len(counts) < 2 or counts[0] != 1 or any(c < 1 for c in counts):
        raise ValueError(f"shell_counts must look like [1, N1, ..., Ns] with every N >= 1, got {counts}")
    return counts


# Kernel geometry


class KernelOptimizerConfig(BaseModel):
    """Gradient-descent schedule for kernel point dispositions (lengths relative to the radius)."""

    step_size: float = Field(
        default=1e-2,
        gt=0,
        description=(
            "Moving factor, multiple of r. Used as is while the energy decreases; a rejected step after "
            "warm-up halves it and accepted steps grow it back by 1.1 up to this value"
        ),
    )
    clip: float = Field(default=0.1, gt=0, description="Per-point per-step displacement cap, multiple of r")
    tolerance: float = Field(default=1e-5, gt=0, description="Tangential gradient norm below which a point is at rest")
    max_iterations: int = Field(default=10_000, ge=1, description="Iteration cap")
    warmup: int = Field(default=10, ge=0, description="Iterations before energy monotonicity is enforced")
    collapse_distance: float = Field(default=1e-12, gt=0, description="Pairwise distance treated as a collapse")


class DispositionReport(BaseModel):
    """Invariant metrics of a kernel disposition."""

    shell_error_max: float = Field(..., description="Largest |norm - shell radius| over shell points")
    min_pairwise_distance: float = Field(..., description="Smallest distance between two kernel points")
    center_offset: float = Field(..., description="Distance of point 0 from the origin")
    radii_error_max: float = Field(0.0, description="Largest deviation of stored shell radii from 2j/(2s+1) r")
    count_consistent: bool = Field(True, description="Whether K equals 1 + sum of shell counts")

    def passes(self, tol: float = 1e-6) -> bool:
        return (
            self.shell_error_max < tol
            and self.center_offset == 0.0
            and self.radii_error_max < tol
            and self.count_consistent
            and self.min_pairwise_distance > 0
        )


# Network


class HeadConfig(BaseModel):
    """Task head of a network."""

    task: Literal["segmentation", "classification"] = "segmentation"
    num_classes: int = Field(default=13, ge=2, description="Number of output classes")


class ArchitectureConfig(BaseModel):
    """Layer widths, depths and operator choices of an encoder(-decoder) network."""

    name: str = "custom"
    blocks_per_layer: list[int] = Field(default_factory=lambda: [3, 3, 9, 12, 3])
    decoder_blocks_per_layer: int = Field(default=1, ge=0)
    channels_per_layer: list[int] = Field(default_factory=lambda: [64, 96, 128, 192, 256])
    neighbors_per_layer: list[int] = Field(default_factory=lambda: [12, 16, 20, 20, 20])
    conv_radius: float = Field(default=2.1, gt=0, description="Kernel radius as a multiple of the layer cell")
    grid_ratio: float = Field(default=2.2, gt=1, description="Cell growth between consecutive layers")
    first_cell: float = Field(default=0.04, gt=0, description="Cell size of the first layer, meters")
    shell_counts: list[int] = Field(default_factory=lambda: [1, 14, 28])
    operator: Literal["kpconvx", "kpconvd"] = "kpconvx"
    groups: int = Field(default=8, description="G > 0, or -C_g channels per group when negative")
    expansion: int = Field(default=4, ge=1, description="Inverted bottleneck expansion factor")
    droppath_rate: float = Field(default=0.1, ge=0, lt=1)
    double_shortcut: bool = False
    in_channels: int = Field(default=5, ge=1, description="Input feature width")
    head: HeadConfig = Field(default_factory=HeadConfig)
    seg_hidden: int = Field(default=64, ge=1, description="Hidden width of the segmentation head")
    cls_hidden: int = Field(default=256, ge=1, description="Hidden width of the classification head")
    leaky_slope: float = Field(default=0.1, ge=0)
    bn_momentum: float = Field(default=0.1, gt=0, le=1)
    bn_eps: float = Field(default=1e-6, gt=0)
    modulation_bias: bool = True
    kernel_seed: int = 0
    init_seed: int = 0

    _check_shells = field_validator("shell_counts")(_check_shell_counts)

    @model_validator(mode="after")
    def check_layers(self) -> "ArchitectureConfig":
        lengths = {len(self.blocks_per_layer), len(self.channels_per_layer), len(self.neighbors_per_layer)}
        if len(lengths) != 1:
            raise ValueError("blocks_per_layer, channels_per_layer and neighbors_per_layer must have equal lengths")
        if any(b < 1 for b in self.blocks_per_layer):
            raise ValueError("every layer needs at least one block")
        for c in self.channels_per_layer:
            if c % 16:
                raise ValueError(f"channel width {c} is not divisible by 16")
            if self.operator == "kpconvx" and c % self.group_divisor:
                raise ValueError(f"channel width {c} is not divisible by the group setting {self.groups}")
        return self

    @property
    def group_divisor(self) -> int:
        if self.groups == 0:
            raise ValueError("groups must be non-zero")
        return abs(self.groups)

    def groups_for(self, channels: int) -> int:
        """G for a layer of width ``channels``."""
        return self.groups if self.groups > 0 else channels // -self.groups

    @property
    def num_layers(self) -> int:
        return len(self.channels_per_layer)


# Training


class OptimizerConfig(BaseModel):
    """AdamW and learning-rate schedule parameters."""

    lr: float = Field(default=5e-3, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    beta1: float = Field(default=0.9, gt=0, lt=1)
    beta2: float = Field(default=0.999, gt=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    decay_factor: float = Field(default=0.1, gt=0, le=1)
    decay_epochs: float = Field(default=60, gt=0)
    epochs: int = Field(default=30, ge=1)
    steps_per_epoch: int = Field(default=50, ge=1)
    accumulation: int = Field(default=2, ge=1, description="Forward passes per optimizer step")


class AugmentationConfig(BaseModel):
    """Geometric augmentations, applied in declaration order."""

    unit_sphere: bool = Field(default=False, description="Center and rescale to the unit sphere first")
    unit_sphere_radius: float = Field(default=1.0, gt=0)
    scale_min: float = Field(default=0.9, gt=0)
    scale_max: float = Field(default=1.1, gt=0)
    flip_axis: int = Field(default=0, ge=0, le=2)
    flip_p: float = Field(default=0.5, ge=0, le=1)
    jitter_sigma: float = Field(default=0.005, ge=0)
    jitter_clip: float = Field(default=0.02, gt=0, description="Per-coordinate bound of the jitter")
    rotate_axis: int = Field(default=2, ge=0, le=2)
    rotate: bool = True
    rotation_angle: float | None = Field(default=None, description="Force a rotation angle (radians)")
    # Color augmentations have no effect on colorless synthetic clouds
    chromatic_auto_contrast_p: float = Field(default=0.2, ge=0, le=1)
    drop_color_p: float = Field(default=0.2, ge=0, le=1)

    @model_validator(mode="after")
    def check_scale(self) -> "AugmentationConfig":
        if not self.scale_min <= 1.0 <= self.scale_max:
            raise ValueError(f"scale range [{self.scale_min}, {self.scale_max}] must straddle 1")
        return self

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(scale_min=1.0, scale_max=1.0, flip_p=0.0, jitter_sigma=0.0, rotation_angle=0.0)


class SyntheticSpec(BaseModel):
    """Generator settings for desk-scale synthetic datasets."""

    task: Literal["segmentation", "classification"] = "segmentation"
    num_classes: int = Field(default=4, ge=2)
    train_clouds: int = Field(default=64, ge=1)
    val_clouds: int = Field(default=16, ge=1)
    points_per_cloud: int = Field(default=2048, ge=16)
    noise: float = Field(default=0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def check_classes(self) -> "SyntheticSpec":
        limit = 4 if self.task == "segmentation" else 6
        if self.num_classes > limit:
            raise ValueError(f"{self.task} generator supports at most {limit} classes")
        return self


class TrainConfig(BaseModel):
    """Everything a training run needs besides the seed."""

    arch: ArchitectureConfig
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    augmentation: AugmentationConfig = Field(default_factory=AugmentationConfig)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    batch_clouds: int = Field(default=4, ge=1, description="Clouds per micro-batch")
    batch_points: int = Field(default=8192, ge=1, description="Secondary cap on points per micro-batch")
    label_smoothing: float = Field(default=0.0, ge=0, lt=1)
    votes: int = Field(default=1, ge=1)


class EvaluationMetrics(BaseModel):
    """Voting evaluation results."""

    accuracy: float = Field(..., description="Overall accuracy")
    macc: float = Field(..., description="Class-mean accuracy")
    miou: float = Field(..., description="Class-mean IoU")
    per_class_iou: list[float] = Field(default_factory=list)


# Benchmarks


class BenchSpec(BaseModel):
    """Parameter sweep of one operator."""

    op: Literal["kpconv", "kpconvd", "kpconvd_fullsum", "kpconvx", "kpinv"] = "kpconvd"
    sweep_param: Literal["K", "N", "H", "C", "G"] = "K"
    sweep_values: list[int] = Field(default_factory=lambda: [15, 27, 43])
    n: int = Field(default=4096, ge=1)
    h: int = Field(default=16, ge=1)
    c: int = Field(default=128, ge=1)
    k: int = Field(default=43, ge=2)
    g: int = Field(default=8, ge=1)
    c_out: int = Field(default=64, ge=1, description="Output width of the dense kpconv")
    trials: int = Field(default=7, ge=5)
    warmup: int = Field(default=1, ge=0)
    parallel: bool = False
    seed: int = 0


class BenchRow(BaseModel):
    """One swept instance of a benchmark report."""

    op: str
    param: str
    value: int
    n: int
    h: int
    k: int
    c: int
    g: int
    trials: int
    mean_s: float
    std_s: float
    median_s: float
    influence_s: float
    ops: int
    expected_ops: int
    memory_bytes: int
    parallel: bool = False


class ParamAuditRow(BaseModel):
    """Parameter count of one module of a network."""

    module: str
    kind: str
    count: int


# Command line


class ErrorResponse(BaseModel):
    """Error report printed to standard error by the command line."""

    error: str = Field(..., description="Error type")
    message: str = Field(..., description="Error message")
    detail: str | None = Field(None, description="Additional error details")
