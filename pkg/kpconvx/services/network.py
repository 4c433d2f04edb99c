"""Blocks, encoder/decoder assembly and heads of KPConvX / KPConvD networks."""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Literal

import numpy as np

from kpconvx.errors import ConfigurationError, ContractError, DegenerateInputError, DimensionError
from kpconvx.models.schemas import ArchitectureConfig, HeadConfig, ParamAuditRow
from kpconvx.services.kernelgeo import KernelDisposition, optimize_disposition
from kpconvx.services.kpops import (
    DenseKernel,
    DepthwiseKernel,
    InfluenceTable,
    ModulationHead,
    influence,
    kpconv_dense,
    kpconvd,
    kpconvx,
    local_max_pool,
)
from kpconvx.services.sampling import NeighborTable, PoolMap, StackedCloud, grid_subsample, grid_upsample, knn_truncated
from kpconvx.tensorcore import (
    BNState,
    Parameter,
    Tensor,
    add,
    batch_norm,
    concat_columns,
    leaky_relu,
    matmul,
    no_grad,
    row_scale,
    segment_mean,
    softmax,
)

logger = logging.getLogger(__name__)


def channel_schedule(initial: int = 64, layers: int = 5) -> list[int]:
    """
    Layer widths growing by sqrt(2) per layer, kept divisible by 16.

    Each width is ``initial * sqrt(2)^l`` rounded up to a multiple of 16, raised by 16 when that
    would not exceed the previous width.
    """
    if initial % 16 or initial <= 0:
        raise ConfigurationError(f"Initial width must be a positive multiple of 16, got {initial}")
    widths = [initial]
    for layer in range(1, layers):
        width = 16 * math.ceil(round(initial * math.sqrt(2) ** layer, 9) / 16)
        if width <= widths[-1]:
            width = widths[-1] + 16
        widths.append(width)
    return widths


@lru_cache(maxsize=16)
def _cached_disposition(shell_counts: tuple[int, ...], radius: float, seed: int) -> KernelDisposition:
    return optimize_disposition(list(shell_counts), radius, seed=seed)


# Building blocks


@dataclass
class Linear:
    """Dense layer ``x @ weight (+ bias)``."""

    weight: Parameter
    bias: Parameter | None = None

    @classmethod
    def create(cls, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = False, name: str = "linear"):
        bound = 1.0 / math.sqrt(c_in)
        return cls(
            weight=Parameter(rng.uniform(-bound, bound, (c_in, c_out)), name=f"{name}.weight"),
            bias=Parameter(rng.uniform(-bound, bound, c_out), name=f"{name}.bias") if bias else None,
        )

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias) if p is not None]


@dataclass
class BlockParams:
    """Weights of one inverted-bottleneck block."""

    kernel: DepthwiseKernel
    conv_norm: BNState
    up: Linear
    up_norm: BNState
    down: Linear
    down_norm: BNState
    modulation: ModulationHead | None = None

    @classmethod
    def create(
        cls, cfg: ArchitectureConfig, channels: int, rng: np.random.Generator, name: str
    ) -> "BlockParams":
        K = sum(cfg.shell_counts)
        hidden = cfg.expansion * channels
        modulation = None
        if cfg.operator == "kpconvx":
            modulation = ModulationHead.create(
                channels,
                K,
                cfg.groups_for(channels),
                rng,
                bias=cfg.modulation_bias,
                slope=cfg.leaky_slope,
                name=f"{name}.modulation",
            )
        return cls(
            kernel=DepthwiseKernel.create(K, channels, rng, name=f"{name}.kernel"),
            conv_norm=_norm(cfg, channels, f"{name}.conv_norm"),
            up=Linear.create(channels, hidden, rng, name=f"{name}.up"),
            up_norm=_norm(cfg, hidden, f"{name}.up_norm"),
            down=Linear.create(hidden, channels, rng, name=f"{name}.down"),
            down_norm=_norm(cfg, channels, f"{name}.down_norm"),
            modulation=modulation,
        )

    @property
    def norms(self) -> list[BNState]:
        return [self.conv_norm, self.up_norm, self.down_norm]


def _norm(cfg: ArchitectureConfig, channels: int, name: str) -> BNState:
    return BNState.create(channels, momentum=cfg.bn_momentum, eps=cfg.bn_eps, name=name)


@dataclass(frozen=True)
class ConvSite:
    """Where a convolution runs: its neighbor table, influences and, when strided, the pool map."""

    neighbors: NeighborTable
    influence: InfluenceTable
    lengths: np.ndarray
    pool: PoolMap | None = None


@dataclass
class LayerContext:
    """Geometry of one layer, shared by every block of the layer during a forward pass."""

    index: int
    cell: float
    radius: float
    points: np.ndarray
    lengths: np.ndarray
    neighbors: NeighborTable
    influence: InfluenceTable
    full_influence: InfluenceTable | None = None
    pool: PoolMap | None = None
    strided_neighbors: NeighborTable | None = None
    strided_influence: InfluenceTable | None = None

    @property
    def site(self) -> ConvSite:
        return ConvSite(self.neighbors, self.influence, self.lengths)


@dataclass
class DropPathMask:
    """Per-element keep flags of one DropPath draw."""

    keep: np.ndarray
    rate: float

    def row_factors(self, lengths: np.ndarray) -> np.ndarray:
        scale = 1.0 / (1.0 - self.rate) if self.rate > 0 else 1.0
        return np.repeat(np.where(self.keep, scale, 0.0), lengths)

    @classmethod
    def keep_all(cls, num_elements: int) -> "DropPathMask":
        return cls(keep=np.ones(num_elements, dtype=bool), rate=0.0)


@dataclass
class ForwardState:
    """Per-forward switches passed down to every block."""

    training: bool
    norm_training: bool
    droppath_rate: float
    slope: float
    rng: np.random.Generator | None = None
    modulation_override: float | None = None


def sample_droppath_mask(num_elements: int, rate: float, mode: str, rng: np.random.Generator | None) -> DropPathMask:
    if not 0 <= rate < 1:
        raise ContractError(f"DropPath rate must lie in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return DropPathMask.keep_all(num_elements)
    if rng is None:
        raise ContractError("DropPath in train mode needs a random generator")
    return DropPathMask(keep=rng.random(num_elements) >= rate, rate=rate)


def droppath_apply(
    x: Tensor,
    lengths: np.ndarray,
    rate: float,
    mode: Literal["train", "eval"],
    rng: np.random.Generator | None = None,
    mask_in: DropPathMask | None = None,
) -> tuple[Tensor, DropPathMask]:
    """
    Zero the rows of whole batch elements and rescale the kept ones by ``1 / (1 - rate)``.

    ``mask_in`` reuses a previous draw, so both shortcuts of a double-shortcut block drop the
    same elements. Eval mode is the identity.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"DropPath mode must be train or eval, got {mode}")
    if mode == "eval":
        return x, DropPathMask.keep_all(len(lengths))
    mask = mask_in if mask_in is not None else sample_droppath_mask(len(lengths), rate, mode, rng)
    if mask.rate == 0:
        return x, mask
    return row_scale(x, mask.row_factors(lengths)), mask


def _act(x: Tensor, state: ForwardState) -> Tensor:
    return leaky_relu(x, state.slope)


def _bn(x: Tensor, norm: BNState, state: ForwardState) -> Tensor:
    return batch_norm(x, norm, training=state.norm_training)


def _conv(x: Tensor, center: Tensor, site: ConvSite, params: BlockParams, state: ForwardState) -> Tensor:
    if x.shape[1] != params.kernel.channels:
        raise DimensionError("Block input width does not match the layer width", x.shape, params.kernel.w.shape)
    if params.modulation is not None:
        return kpconvx(
            x, center, site.neighbors, site.influence, params.kernel, params.modulation, state.modulation_override
        )
    return kpconvd(x, site.neighbors, site.influence, params.kernel)


def inverted_block(x: Tensor, site: ConvSite, params: BlockParams, state: ForwardState) -> Tensor:
    """
    Inverted bottleneck: conv, expand MLP, contract MLP, DropPath, residual, activation.

    In a strided block ``x`` lives on the support points; the residual and the modulation
    input are the max-pooled features of ``x`` on the query points.
    """
    center = local_max_pool(x, site.pool) if site.pool is not None else x
    y = _act(_bn(_conv(x, center, site, params, state), params.conv_norm, state), state)
    y = _act(_bn(params.up(y), params.up_norm, state), state)
    y = _bn(params.down(y), params.down_norm, state)
    y, _ = droppath_apply(y, site.lengths, state.droppath_rate, "train" if state.training else "eval", state.rng)
    return _act(add(center, y), state)


def double_shortcut_block(
    x_low: Tensor, x_high: Tensor | None, site: ConvSite, params: BlockParams, state: ForwardState
) -> tuple[Tensor, Tensor]:
    """
    Inverted bottleneck with a second residual path on the expanded features.

    The expanded features of the previous block are added after the up-projection; the first
    block of a layer passes ``x_high = None`` and starts the path from its own up-projection.
    Both shortcuts drop the same batch elements.
    """
    center = local_max_pool(x_low, site.pool) if site.pool is not None else x_low
    mode = "train" if state.training else "eval"
    mask = sample_droppath_mask(len(site.lengths), state.droppath_rate, mode, state.rng)

    y = _act(_bn(_conv(x_low, center, site, params, state), params.conv_norm, state), state)
    high = _act(_bn(params.up(y), params.up_norm, state), state)
    if x_high is not None:
        if x_high.shape != high.shape:
            raise DimensionError(
                "High-dimensional shortcut does not match the expanded width", x_high.shape, high.shape
            )
        dropped, _ = droppath_apply(high, site.lengths, state.droppath_rate, mode, mask_in=mask)
        high = add(x_high, dropped)
    y = _bn(params.down(high), params.down_norm, state)
    y, _ = droppath_apply(y, site.lengths, state.droppath_rate, mode, mask_in=mask)
    return _act(add(center, y), state), high


def stem(features: Tensor, ctx: LayerContext, kernel: DenseKernel, norm: BNState, state: ForwardState) -> Tensor:
    """Dense KPConv on the input features, then batch norm and activation."""
    if ctx.full_influence is None:
        raise ContractError("The stem needs full-mode influences of the first layer")
    out = kpconv_dense(features, ctx.neighbors, ctx.full_influence, kernel)
    return _act(_bn(out, norm, state), state)


# Network


@dataclass
class EncoderLayer:
    blocks: list[BlockParams]
    raise_linear: Linear | None = None
    raise_norm: BNState | None = None


@dataclass
class DecoderLayer:
    fuse: Linear
    fuse_norm: BNState
    blocks: list[BlockParams] = field(default_factory=list)


@dataclass
class _Entry:
    parameter: Parameter
    module: str
    kind: str


def build_contexts(
    cloud: StackedCloud, cfg: ArchitectureConfig, disposition: KernelDisposition
) -> tuple[StackedCloud, PoolMap, list[LayerContext]]:
    """
    Subsample the cloud into the layer pyramid and compute every neighbor and influence table.

    Returns:
        (first-layer cloud with pooled input features, input pool map, layer contexts)
    """
    first, input_pool = grid_subsample(cloud, cfg.first_cell)
    _check_lengths(first.lengths, 0)

    clouds = [first]
    pools: list[PoolMap] = []
    for layer in range(1, cfg.num_layers):
        previous = clouds[-1]
        geometry = StackedCloud(
            points=previous.points, features=np.zeros((previous.num_points, 0)), lengths=previous.lengths
        )
        pooled, pool = grid_subsample(geometry, cfg.first_cell * cfg.grid_ratio**layer)
        _check_lengths(pooled.lengths, layer)
        clouds.append(pooled)
        pools.append(pool)

    contexts = []
    for layer, layer_cloud in enumerate(clouds):
        cell = cfg.first_cell * cfg.grid_ratio**layer
        radius = cfg.conv_radius * cell
        H = cfg.neighbors_per_layer[layer]
        points, lengths = layer_cloud.points, layer_cloud.lengths
        neighbors = knn_truncated(points, points, lengths, lengths, H, radius)
        ctx = LayerContext(
            index=layer,
            cell=cell,
            radius=radius,
            points=points,
            lengths=lengths,
            neighbors=neighbors,
            influence=influence(points, points, neighbors, disposition, "nearest", cell),
        )
        if layer == 0:
            ctx.full_influence = influence(points, points, neighbors, disposition, "full", cell)
        if layer + 1 < len(clouds):
            queries = clouds[layer + 1]
            strided = knn_truncated(
                queries.points, points, queries.lengths, lengths, cfg.neighbors_per_layer[layer + 1], radius
            )
            ctx.pool = pools[layer]
            ctx.strided_neighbors = strided
            ctx.strided_influence = influence(queries.points, points, strided, disposition, "nearest", cell)
        contexts.append(ctx)
    return first, input_pool, contexts


def _check_lengths(lengths: np.ndarray, layer: int) -> None:
    empty = np.flatnonzero(lengths < 1)
    if empty.size:
        raise DegenerateInputError(layer, int(empty[0]))


class Model:
    """
    Encoder(-decoder) network with a stem KPConv, inverted-bottleneck blocks and a task head.

    Parameters are created eagerly in a fixed order from ``cfg.init_seed``. The kernel
    disposition is optimized lazily on the first forward pass.
    """

    def __init__(self, cfg: ArchitectureConfig):
        self.cfg = cfg
        self.training = True
        self.freeze_norm = False
        self._entries: dict[str, _Entry] = {}
        self._norms: list[BNState] = []
        self._rng = np.random.default_rng(cfg.init_seed + 1)
        rng = np.random.default_rng(cfg.init_seed)
        K = sum(cfg.shell_counts)
        widths = cfg.channels_per_layer

        self.stem_kernel = DenseKernel.create(K, cfg.in_channels, widths[0], rng, name="stem")
        self.stem_norm = _norm(cfg, widths[0], "stem.norm")
        self._register("stem", "dense_kernel", self.stem_kernel.W)
        self._register_norm("stem", self.stem_norm)

        self.encoder: list[EncoderLayer] = []
        for layer, (channels, depth) in enumerate(zip(widths, cfg.blocks_per_layer)):
            encoder_layer = EncoderLayer(blocks=[])
            if layer > 0:
                module = f"encoder.{layer}.raise"
                encoder_layer.raise_linear = Linear.create(widths[layer - 1], channels, rng, name=module)
                encoder_layer.raise_norm = _norm(cfg, channels, f"{module}.norm")
                self._register(module, "mlp", *encoder_layer.raise_linear.parameters())
                self._register_norm(module, encoder_layer.raise_norm)
            for b in range(depth):
                encoder_layer.blocks.append(self._block(channels, rng, f"encoder.{layer}.block{b}"))
            self.encoder.append(encoder_layer)

        self.decoder: list[DecoderLayer] = []
        if cfg.head.task == "segmentation":
            for layer in range(cfg.num_layers - 2, -1, -1):
                module = f"decoder.{layer}.fuse"
                decoder_layer = DecoderLayer(
                    fuse=Linear.create(widths[layer + 1] + widths[layer], widths[layer], rng, name=module),
                    fuse_norm=_norm(cfg, widths[layer], f"{module}.norm"),
                )
                self._register(module, "mlp", *decoder_layer.fuse.parameters())
                self._register_norm(module, decoder_layer.fuse_norm)
                for b in range(cfg.decoder_blocks_per_layer):
                    decoder_layer.blocks.append(self._block(widths[layer], rng, f"decoder.{layer}.block{b}"))
                self.decoder.append(decoder_layer)
            head_in, hidden = widths[0], cfg.seg_hidden
        else:
            head_in, hidden = widths[-1], cfg.cls_hidden

        self.head_hidden = Linear.create(head_in, hidden, rng, name="head.hidden")
        self.head_norm = _norm(cfg, hidden, "head.norm")
        self.head_out = Linear.create(hidden, cfg.head.num_classes, rng, bias=True, name="head.out")
        self._register("head", "mlp", *self.head_hidden.parameters(), *self.head_out.parameters())
        self._register_norm("head", self.head_norm)
        logger.info("Built %s network with %d parameters", cfg.name, self.num_parameters)

    def _register(self, module: str, kind: str, *parameters: Parameter) -> None:
        for parameter in parameters:
            if parameter.name in self._entries:
                raise ConfigurationError(f"Duplicate parameter name {parameter.name}")
            self._entries[parameter.name] = _Entry(parameter, module, kind)

    def _register_norm(self, module: str, norm: BNState) -> None:
        self._register(module, "norm", norm.scale, norm.shift)
        self._norms.append(norm)

    def _block(self, channels: int, rng: np.random.Generator, module: str) -> BlockParams:
        params = BlockParams.create(self.cfg, channels, rng, module)
        self._register(module, "kernel", params.kernel.w)
        self._register(module, "mlp", *params.up.parameters(), *params.down.parameters())
        for norm in params.norms:
            self._register_norm(module, norm)
        if params.modulation is not None:
            self._register(module, "modulation", *params.modulation.parameters())
        return params

    # Parameters and state

    @property
    def parameters(self) -> dict[str, Parameter]:
        return {name: entry.parameter for name, entry in self._entries.items()}

    @property
    def num_parameters(self) -> int:
        return sum(entry.parameter.size for entry in self._entries.values())

    def parameter_audit(self) -> list[ParamAuditRow]:
        """Parameter counts grouped by module and kind, in construction order."""
        counts: dict[tuple[str, str], int] = {}
        for entry in self._entries.values():
            key = (entry.module, entry.kind)
            counts[key] = counts.get(key, 0) + entry.parameter.size
        return [ParamAuditRow(module=module, kind=kind, count=count) for (module, kind), count in counts.items()]

    def zero_grad(self) -> None:
        for parameter in self.parameters.values():
            parameter.zero_grad()

    def train(self) -> "Model":
        self.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.values.copy() for name, p in self.parameters.items()}
        for norm in self._norms:
            state[f"{norm.name}.running_mean"] = norm.running_mean.copy()
            state[f"{norm.name}.running_var"] = norm.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        if missing:
            raise ContractError(f"Checkpoint lacks {len(missing)} entries, first: {missing[0]}")
        for name, parameter in self.parameters.items():
            if state[name].shape != parameter.shape:
                raise DimensionError(f"Checkpoint entry {name} has the wrong shape", state[name].shape, parameter.shape)
            parameter.values[...] = state[name]
        for norm in self._norms:
            norm.running_mean[...] = state[f"{norm.name}.running_mean"]
            norm.running_var[...] = state[f"{norm.name}.running_var"]

    @property
    def disposition(self) -> KernelDisposition:
        return _cached_disposition(tuple(self.cfg.shell_counts), self.cfg.conv_radius, self.cfg.kernel_seed)

    # Forward

    def forward_state(self, rng: np.random.Generator | None = None, modulation_override: float | None = None):
        return ForwardState(
            training=self.training,
            norm_training=self.training and not self.freeze_norm,
            droppath_rate=self.cfg.droppath_rate,
            slope=self.cfg.leaky_slope,
            rng=rng if rng is not None else self._rng,
            modulation_override=modulation_override,
        )

    def forward(
        self, cloud: StackedCloud, rng: np.random.Generator | None = None, modulation_override: float | None = None
    ) -> Tensor:
        return encoder_decoder_forward(self, cloud, self.forward_state(rng, modulation_override))

    def predict_proba(self, cloud: StackedCloud) -> np.ndarray:
        """Softmax probabilities of a forward pass without graph recording."""
        with no_grad():
            return softmax(self.forward(cloud).values)


def _run_blocks(
    x: Tensor, high: Tensor | None, blocks: list[BlockParams], sites: list[ConvSite], state: ForwardState, double: bool
) -> Tensor:
    for params, site in zip(blocks, sites):
        if double:
            x, high = double_shortcut_block(x, high, site, params, state)
        else:
            x = inverted_block(x, site, params, state)
    return x


def encoder_decoder_forward(model: Model, cloud: StackedCloud, state: ForwardState) -> Tensor:
    """
    Full forward pass of ``model`` on a stacked cloud.

    Segmentation returns one logit row per input point (projected back through the input pool
    map); classification returns one row per batch element.
    """
    cfg = model.cfg
    if cloud.features.shape[1] != cfg.in_channels:
        raise DimensionError("Input features do not match in_channels", cloud.features.shape, (cfg.in_channels,))
    first, input_pool, contexts = build_contexts(cloud, cfg, model.disposition)

    x = Tensor(first.features, dtype=model.stem_kernel.W.dtype)
    x = stem(x, contexts[0], model.stem_kernel, model.stem_norm, state)
    skips = []
    for layer, encoder_layer in enumerate(model.encoder):
        sites = [contexts[layer].site] * len(encoder_layer.blocks)
        if layer > 0:
            x = _bn(encoder_layer.raise_linear(x), encoder_layer.raise_norm, state)
            previous = contexts[layer - 1]
            sites[0] = ConvSite(
                previous.strided_neighbors, previous.strided_influence, contexts[layer].lengths, previous.pool
            )
        x = _run_blocks(x, None, encoder_layer.blocks, sites, state, cfg.double_shortcut)
        skips.append(x)

    if cfg.head.task == "classification":
        pooled = segment_mean(x, contexts[-1].lengths)
        hidden = _act(_bn(model.head_hidden(pooled), model.head_norm, state), state)
        return model.head_out(hidden)

    for decoder_layer, layer in zip(model.decoder, range(cfg.num_layers - 2, -1, -1)):
        up = grid_upsample(x, contexts[layer].pool)
        x = _act(_bn(decoder_layer.fuse(concat_columns(up, skips[layer])), decoder_layer.fuse_norm, state), state)
        sites = [contexts[layer].site] * len(decoder_layer.blocks)
        x = _run_blocks(x, None, decoder_layer.blocks, sites, state, cfg.double_shortcut)

    hidden = _act(_bn(model.head_hidden(x), model.head_norm, state), state)
    return grid_upsample(model.head_out(hidden), input_pool)


# Parameter formulas and presets


def expected_parameter_counts(cfg: ArchitectureConfig) -> dict[str, int]:
    """Closed-form parameter count of a network, per kind."""
    K = sum(cfg.shell_counts)
    widths = cfg.channels_per_layer
    counts = {
        "dense_kernel": K * cfg.in_channels * widths[0],
        "kernel": 0,
        "modulation": 0,
        "mlp": 0,
        "norm": 2 * widths[0],
    }

    def add_block(channels: int, n: int) -> None:
        hidden = cfg.expansion * channels
        counts["kernel"] += n * K * channels
        counts["mlp"] += n * 2 * channels * hidden
        counts["norm"] += n * 2 * (2 * channels + hidden)
        if cfg.operator == "kpconvx":
            c_g = channels // cfg.groups_for(channels)
            bias = (channels + K * c_g) if cfg.modulation_bias else 0
            counts["modulation"] += n * (channels * channels + channels * K * c_g + bias)

    for layer, (channels, depth) in enumerate(zip(widths, cfg.blocks_per_layer)):
        if layer > 0:
            counts["mlp"] += widths[layer - 1] * channels
            counts["norm"] += 2 * channels
        add_block(channels, depth)
    if cfg.head.task == "segmentation":
        for layer in range(cfg.num_layers - 1):
            counts["mlp"] += (widths[layer + 1] + widths[layer]) * widths[layer]
            counts["norm"] += 2 * widths[layer]
            add_block(widths[layer], cfg.decoder_blocks_per_layer)
        head_in, hidden = widths[0], cfg.seg_hidden
    else:
        head_in, hidden = widths[-1], cfg.cls_hidden
    counts["mlp"] += head_in * hidden + hidden * cfg.head.num_classes + cfg.head.num_classes
    counts["norm"] += 2 * hidden
    return counts


ARCHITECTURE_PRESETS = ("kpconvx-l", "kpconvx-s", "kpconvd-l", "kpconvd-s", "tiny-seg", "tiny-cls")


def architecture_preset(name: str, num_classes: int | None = None, **overrides) -> ArchitectureConfig:
    """
    Named architecture.

    ``kpconvx-l`` / ``kpconvd-l`` use [3, 3, 9, 12, 3] blocks, the ``-s`` variants
    [2, 2, 2, 8, 2]; ``tiny-seg`` and ``tiny-cls`` are desk-scale networks. The full-size presets keep
    the default DropPath rate of 0.1 at every depth, the tiny ones use 0.05.
    """
    widths = channel_schedule(64, 5)
    if name in ("kpconvx-l", "kpconvd-l", "kpconvx-s", "kpconvd-s"):
        values = dict(
            name=name,
            blocks_per_layer=[3, 3, 9, 12, 3] if name.endswith("-l") else [2, 2, 2, 8, 2],
            channels_per_layer=widths,
            operator="kpconvx" if name.startswith("kpconvx") else "kpconvd",
            in_channels=5,
            head=HeadConfig(task="segmentation", num_classes=num_classes or 13),
        )
    elif name in ("tiny-seg", "tiny-cls"):
        task = "segmentation" if name == "tiny-seg" else "classification"
        values = dict(
            name=name,
            blocks_per_layer=[1, 1, 1, 2, 1],
            channels_per_layer=channel_schedule(16, 5),
            neighbors_per_layer=[8, 8, 10, 10, 10],
            shell_counts=[1, 6],
            droppath_rate=0.05,
            in_channels=2 if task == "segmentation" else 7,
            head=HeadConfig(task=task, num_classes=num_classes or (4 if task == "segmentation" else 6)),
        )
    else:
        raise ConfigurationError(
            f"Unknown architecture preset '{name}', expected one of {', '.join(ARCHITECTURE_PRESETS)}"
        )
    values.update(overrides)
    return ArchitectureConfig(**values)
