"""Discrete search space of 1D-conv classifiers and the weight-sharing supernet.

The macro-architecture is eight convolutional stages with fixed strides
(5, 4, 2, 1, 1, 1, 1, 1) and per-stage choices of channel width, repeat
count, and kernel size. A sub-network is one choice per gene; its forward
pass runs on deterministic slices of the supernet's maximal weights:
first-c channels, first-r repeat slots, and a centered kernel window with
even overhang biased left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUM_CLASSES = 6
INPUT_CHANNELS = 1

# Validation input length for the bottleneck filter: a 5 s segment at 16 kHz.
DEFAULT_VALIDATION_INPUT_LEN = 80000
DEFAULT_BOTTLENECK_THETA = 0.35


@dataclass(frozen=True)
class StageSpec:
    """Choice lists for one stage; all lists strictly increasing."""

    channels: tuple[int, ...]
    repeats: tuple[int, ...]
    kernels: tuple[int, ...]
    stride: int

    def __post_init__(self):
        for label, choices in (("channels", self.channels),
                               ("repeats", self.repeats),
                               ("kernels", self.kernels)):
            if not choices:
                raise ValueError(f"stage {label} choices must be non-empty")
            if any(c < 1 for c in choices):
                raise ValueError(f"stage {label} choices must be positive")
            if any(a >= b for a, b in zip(choices, choices[1:])):
                raise ValueError(f"stage {label} choices must be strictly increasing")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class SearchSpace:
    stages: tuple[StageSpec, ...]
    input_channels: int = INPUT_CHANNELS
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if not self.stages:
            raise ValueError("search space needs at least one stage")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"channels": list(s.channels), "repeats": list(s.repeats),
                 "kernels": list(s.kernels), "stride": s.stride}
                for s in self.stages
            ],
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "SearchSpace":
        stages = tuple(
            StageSpec(tuple(s["channels"]), tuple(s["repeats"]),
                      tuple(s["kernels"]), int(s["stride"]))
            for s in d["stages"]
        )
        return SearchSpace(stages,
                           input_channels=int(d.get("input_channels", INPUT_CHANNELS)),
                           num_classes=int(d.get("num_classes", NUM_CLASSES)))


def _three_point(lo: int, hi: int) -> tuple[int, int, int]:
    return (lo, (lo + hi) // 2, hi)


def default_search_space() -> SearchSpace:
    """The eight-stage space: {min, mid, max} channels per published range,
    repeats {1} for the two downsampling front stages and {1,2,3} elsewhere,
    fixed kernels 10/8/4/1 up front and 3-way kernel buckets in the tail."""
    rows = [
        # (channel range, repeats, kernels, stride)
        ((16, 32), (1,), (10,), 5),
        ((32, 64), (1,), (8,), 4),
        ((64, 128), (1, 2, 3), (4,), 2),
        ((128, 256), (1, 2, 3), (1,), 1),
        ((128, 256), (1, 2, 3), (1, 2, 3), 1),
        ((128, 256), (1, 2, 3), (4, 5, 6), 1),
        ((128, 256), (1, 2, 3), (7, 8, 9), 1),
        ((128, 256), (1, 2, 3), (10, 11, 12), 1),
    ]
    stages = tuple(
        StageSpec(_three_point(*chans), reps, kers, stride)
        for chans, reps, kers, stride in rows
    )
    return SearchSpace(stages)


def space_cardinality(space: SearchSpace) -> int:
    n = 1
    for s in space.stages:
        n *= len(s.channels) * len(s.repeats) * len(s.kernels)
    return n


@dataclass(frozen=True)
class SubnetConfig:
    """One architecture choice per stage: the genome of the search."""

    channels: tuple[int, ...]
    repeats: tuple[int, ...]
    kernels: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.channels) == len(self.repeats) == len(self.kernels)):
            raise ValueError("channels, repeats and kernels must have equal length")

    def encode(self, space: SearchSpace) -> tuple[int, ...]:
        """Flat per-gene choice indices: (ch, rep, ker) for each stage."""
        _check_membership(self, space)
        out = []
        for st, c, r, k in zip(space.stages, self.channels, self.repeats, self.kernels):
            out += [st.channels.index(c), st.repeats.index(r), st.kernels.index(k)]
        return tuple(out)

    @staticmethod
    def decode(space: SearchSpace, genes) -> "SubnetConfig":
        genes = tuple(int(g) for g in genes)
        if len(genes) != 3 * space.num_stages:
            raise ValueError(f"expected {3 * space.num_stages} genes, got {len(genes)}")
        chans, reps, kers = [], [], []
        for i, st in enumerate(space.stages):
            ci, ri, ki = genes[3 * i:3 * i + 3]
            try:
                chans.append(st.channels[ci])
                reps.append(st.repeats[ri])
                kers.append(st.kernels[ki])
            except IndexError:
                raise ValueError(f"gene index out of range in stage {i + 1}") from None
        return SubnetConfig(tuple(chans), tuple(reps), tuple(kers))

    def describe(self) -> str:
        return "|".join(
            f"c{c}r{r}k{k}" for c, r, k in zip(self.channels, self.repeats, self.kernels)
        )


def _check_membership(config: SubnetConfig, space: SearchSpace):
    if len(config.channels) != space.num_stages:
        raise ValueError(f"config has {len(config.channels)} stages, space has {space.num_stages}")
    for i, (st, c, r, k) in enumerate(
            zip(space.stages, config.channels, config.repeats, config.kernels)):
        if c not in st.channels or r not in st.repeats or k not in st.kernels:
            raise ValueError(f"config stage {i + 1} choice ({c}, {r}, {k}) not in space")


def min_config(space: SearchSpace) -> SubnetConfig:
    return SubnetConfig(tuple(s.channels[0] for s in space.stages),
                        tuple(s.repeats[0] for s in space.stages),
                        tuple(s.kernels[0] for s in space.stages))


def max_config(space: SearchSpace) -> SubnetConfig:
    return SubnetConfig(tuple(s.channels[-1] for s in space.stages),
                        tuple(s.repeats[-1] for s in space.stages),
                        tuple(s.kernels[-1] for s in space.stages))


def mid_config(space: SearchSpace) -> SubnetConfig:
    return SubnetConfig(tuple(s.channels[len(s.channels) // 2] for s in space.stages),
                        tuple(s.repeats[len(s.repeats) // 2] for s in space.stages),
                        tuple(s.kernels[len(s.kernels) // 2] for s in space.stages))


def all_configs(space: SearchSpace):
    """Enumerate every config in deterministic gene order."""
    def rec(i, chans, reps, kers):
        if i == space.num_stages:
            yield SubnetConfig(tuple(chans), tuple(reps), tuple(kers))
            return
        st = space.stages[i]
        for c in st.channels:
            for r in st.repeats:
                for k in st.kernels:
                    yield from rec(i + 1, chans + [c], reps + [r], kers + [k])
    yield from rec(0, [], [], [])


def sample_uniform(space: SearchSpace, rng: np.random.Generator,
                   validator=None, max_retries: int = 1000) -> SubnetConfig:
    """Draw each gene independently uniform; resample until validator passes."""
    for _ in range(max_retries):
        chans, reps, kers = [], [], []
        for st in space.stages:
            chans.append(st.channels[rng.integers(len(st.channels))])
            reps.append(st.repeats[rng.integers(len(st.repeats))])
            kers.append(st.kernels[rng.integers(len(st.kernels))])
        config = SubnetConfig(tuple(chans), tuple(reps), tuple(kers))
        if validator is None or validator(config):
            return config
    raise RuntimeError(f"constraint infeasible: {max_retries} consecutive invalid samples")


@dataclass(frozen=True)
class LayerShape:
    """Geometry of one conv layer: enough to derive its length map and MACs."""

    c_in: int
    c_out: int
    kernel: int
    stride: int
    stage: int = 0

    def with_stage(self, stage: int) -> "LayerShape":
        return LayerShape(self.c_in, self.c_out, self.kernel, self.stride, stage)


def layer_shapes(space: SearchSpace, config: SubnetConfig) -> tuple[LayerShape, ...]:
    """Conv layers of a config in execution order, one per repeat slot.

    The first slot of a stage applies the stage stride and maps the previous
    width to this stage's width; later slots are stride-1 at constant width.
    """
    _check_membership(config, space)
    out = []
    c_prev = space.input_channels
    for si, (st, c, r, k) in enumerate(
            zip(space.stages, config.channels, config.repeats, config.kernels)):
        out.append(LayerShape(c_prev, c, k, st.stride, si + 1))
        for _ in range(r - 1):
            out.append(LayerShape(c, c, k, 1, si + 1))
        c_prev = c
    return tuple(out)


def layer_output_lengths(layers, input_len: int) -> list[int]:
    """Valid-conv length chain; raises naming the failing stage."""
    lengths = []
    L = input_len
    for ly in layers:
        if L < ly.kernel:
            raise ValueError(
                f"stage {ly.stage} (kernel {ly.kernel}, stride {ly.stride}): "
                f"input length {L} is shorter than the kernel")
        L = (L - ly.kernel) // ly.stride + 1
        lengths.append(L)
    return lengths


def min_input_length(space: SearchSpace, config: SubnetConfig) -> int:
    """Smallest input length for which every layer's output has >= 1 step."""
    L = 1
    for ly in reversed(layer_shapes(space, config)):
        L = (L - 1) * ly.stride + ly.kernel
    return L


def parameter_count(space: SearchSpace, config: SubnetConfig) -> int:
    n = 0
    for ly in layer_shapes(space, config):
        n += ly.c_out * ly.c_in * ly.kernel + 3 * ly.c_out  # bias + norm gain/shift
    n += space.num_classes * config.channels[-1] + space.num_classes
    return n


def validate_config(config: SubnetConfig, space: SearchSpace, profile,
                    theta: float = DEFAULT_BOTTLENECK_THETA,
                    input_len: int = DEFAULT_VALIDATION_INPUT_LEN) -> bool:
    """Reject configs where one operator dominates the estimated latency.

    True iff no single conv layer's estimated latency exceeds theta times
    the whole model's estimated latency.
    """
    from .costmodel import bottleneck_fraction  # deferred: costmodel builds on space

    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    if theta == 1.0:
        _check_membership(config, space)
        return True
    return bottleneck_fraction(profile, space, config, input_len) <= theta


class Supernet:
    """Maximal shared weights from which any config's forward pass is sliced.

    Per stage and repeat slot: conv weight at maximal channels and kernel,
    bias, and channel-norm gain/shift. Plus a head at maximal final width.
    """

    def __init__(self, space: SearchSpace, seed: int = 0, dtype=np.float32):
        self.space = space
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.stages = []
        c_prev_max = space.input_channels
        for si, st in enumerate(space.stages):
            c_max = st.channels[-1]
            k_max = st.kernels[-1]
            slots = []
            for ri in range(max(st.repeats)):
                c_in_max = c_prev_max if ri == 0 else c_max
                std = math.sqrt(2.0 / (c_in_max * k_max))
                prefix = f"s{si}.r{ri}"
                slots.append({
                    "w": T.parameter(
                        rng.normal(0.0, std, (c_max, c_in_max, k_max)).astype(self.dtype),
                        f"{prefix}.w"),
                    "b": T.parameter(np.zeros(c_max, dtype=self.dtype), f"{prefix}.b"),
                    "gain": T.parameter(np.ones(c_max, dtype=self.dtype), f"{prefix}.gain"),
                    "shift": T.parameter(np.zeros(c_max, dtype=self.dtype), f"{prefix}.shift"),
                })
            self.stages.append(slots)
            c_prev_max = c_max
        c_last_max = space.stages[-1].channels[-1]
        # Zero head: an untrained classifier ties every logit, so argmax is
        # exactly class 0 and chance-level behavior is deterministic.
        self.head_w = T.parameter(
            np.zeros((space.num_classes, c_last_max), dtype=self.dtype), "head.w")
        self.head_b = T.parameter(np.zeros(space.num_classes, dtype=self.dtype), "head.b")

    def parameters(self) -> list[Tensor]:
        out = []
        for slots in self.stages:
            for slot in slots:
                out += [slot["w"], slot["b"], slot["gain"], slot["shift"]]
        out += [self.head_w, self.head_b]
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_named_tensors(self, tensors: dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {p.name!r}")
            arr = tensors[p.name]
            if arr.shape != p.data.shape:
                raise ValueError(f"tensor {p.name!r} has shape {arr.shape}, "
                                 f"expected {p.data.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _kernel_window(k_max: int, k: int) -> slice:
    start = (k_max - k) // 2  # even overhang biased left
    return slice(start, start + k)


def _sliced_layers(supernet: Supernet, config: SubnetConfig):
    """Layer tuples (w, b, gain, shift, stride, residual) sliced from shared weights."""
    space = supernet.space
    layers = []
    c_prev = space.input_channels
    for si, (st, c, r, k) in enumerate(
            zip(space.stages, config.channels, config.repeats, config.kernels)):
        win = _kernel_window(st.kernels[-1], k)
        for ri in range(r):
            slot = supernet.stages[si][ri]
            c_in = c_prev if ri == 0 else c
            w = T.narrow(slot["w"], (slice(0, c), slice(0, c_in), win))
            b = T.narrow(slot["b"], slice(0, c))
            gain = T.narrow(slot["gain"], slice(0, c))
            shift = T.narrow(slot["shift"], slice(0, c))
            layers.append((w, b, gain, shift, st.stride if ri == 0 else 1, ri > 0))
        c_prev = c
    head_w = T.narrow(supernet.head_w, (slice(None), slice(0, config.channels[-1])))
    return layers, head_w, supernet.head_b


def _run_stack(layers, head_w, head_b, x: Tensor) -> Tensor:
    """conv -> relu -> map norm per layer; repeat slots add a cropped skip.

    The residual path keeps 24-layer-deep configs trainable; the whole-map
    norm keeps amplitude envelopes visible to later stages (per-time-step
    normalization erases them, which stalls learning on this task).
    """
    h = x
    for w, b, gain, shift, stride, residual in layers:
        y = T.rms_norm(T.relu(T.conv1d(h, w, b, stride)), gain, shift)
        if residual:
            k = w.data.shape[2]
            start = (k - 1) // 2
            l_out = y.data.shape[-1]
            skip = T.narrow(h, (..., slice(start, start + l_out)))
            y = T.add(skip, y)
        h = y
    pooled = T.global_avg_pool(h)
    return T.affine(pooled, head_w, head_b)


def subnet_forward(supernet: Supernet, config: SubnetConfig, x: Tensor) -> Tensor:
    """Forward one config through sliced supernet weights; logits [.., 6]."""
    shapes = layer_shapes(supernet.space, config)
    L = x.data.shape[-1]
    need = min_input_length(supernet.space, config)
    if L < need:
        layer_output_lengths(shapes, L)  # raises naming the failing layer
    layers, head_w, head_b = _sliced_layers(supernet, config)
    return _run_stack(layers, head_w, head_b, x)


class SubnetModel:
    """A standalone classifier with dense weights (extracted or fresh)."""

    def __init__(self, space: SearchSpace, config: SubnetConfig,
                 layers, head_w: Tensor, head_b: Tensor):
        self.space = space
        self.config = config
        self.layers = layers
        self.head_w = head_w
        self.head_b = head_b

    @staticmethod
    def initialized(space: SearchSpace, config: SubnetConfig,
                    seed: int = 0, dtype=np.float32) -> "SubnetModel":
        """Fresh weights for a fixed architecture (teacher/baseline training)."""
        dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        layers = []
        prev_stage = None
        for i, ly in enumerate(layer_shapes(space, config)):
            std = math.sqrt(2.0 / (ly.c_in * ly.kernel))
            layers.append((
                T.parameter(rng.normal(0.0, std, (ly.c_out, ly.c_in, ly.kernel))
                            .astype(dtype), f"l{i}.w"),
                T.parameter(np.zeros(ly.c_out, dtype=dtype), f"l{i}.b"),
                T.parameter(np.ones(ly.c_out, dtype=dtype), f"l{i}.gain"),
                T.parameter(np.zeros(ly.c_out, dtype=dtype), f"l{i}.shift"),
                ly.stride,
                ly.stage == prev_stage,
            ))
            prev_stage = ly.stage
        head_w = T.parameter(
            np.zeros((space.num_classes, config.channels[-1]), dtype=dtype), "head.w")
        head_b = T.parameter(np.zeros(space.num_classes, dtype=dtype), "head.b")
        return SubnetModel(space, config, layers, head_w, head_b)

    def forward(self, x: Tensor) -> Tensor:
        L = x.data.shape[-1]
        need = min_input_length(self.space, self.config)
        if L < need:
            layer_output_lengths(layer_shapes(self.space, self.config), L)
        return _run_stack(self.layers, self.head_w, self.head_b, x)

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Gradient-free forward on a raw array; returns logits as an array."""
        return self.forward(Tensor(x)).data

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b, gain, shift, _, _ in self.layers:
            out += [w, b, gain, shift]
        out += [self.head_w, self.head_b]
        return out

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_named_tensors(self, tensors: dict[str, np.ndarray]):
        for p in self.parameters():
            if p.name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {p.name!r}")
            arr = tensors[p.name]
            if arr.shape != p.data.shape:
                raise ValueError(f"tensor {p.name!r} has shape {arr.shape}, "
                                 f"expected {p.data.shape}")
            p.data = arr.copy()

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def extract_subnet(supernet: Supernet, config: SubnetConfig) -> SubnetModel:
    """Copy the active slices into a standalone model; no retraining needed."""
    space = supernet.space
    layers = []
    c_prev = space.input_channels
    li = 0
    for si, (st, c, r, k) in enumerate(
            zip(space.stages, config.channels, config.repeats, config.kernels)):
        win = _kernel_window(st.kernels[-1], k)
        for ri in range(r):
            slot = supernet.stages[si][ri]
            c_in = c_prev if ri == 0 else c
            layers.append((
                T.parameter(slot["w"].data[:c, :c_in, win].copy(), f"l{li}.w"),
                T.parameter(slot["b"].data[:c].copy(), f"l{li}.b"),
                T.parameter(slot["gain"].data[:c].copy(), f"l{li}.gain"),
                T.parameter(slot["shift"].data[:c].copy(), f"l{li}.shift"),
                st.stride if ri == 0 else 1,
                ri > 0,
            ))
            li += 1
        c_prev = c
    head_w = T.parameter(supernet.head_w.data[:, :config.channels[-1]].copy(), "head.w")
    head_b = T.parameter(supernet.head_b.data.copy(), "head.b")
    return SubnetModel(space, config, layers, head_w, head_b)
