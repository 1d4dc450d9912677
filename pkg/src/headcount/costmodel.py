"""Table-driven per-operator latency/energy estimation with an analytic fallback.

Costs come from a profile table keyed by exact operator signatures; misses
fall back to an affine-in-MACs model fitted to the table by least squares.
Per-model latency is the sum over all conv layers, and daily energy follows
a duty-cycle model: one fixed-length segment processed at a time over the
active hours of a day.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .space import SearchSpace, SubnetConfig, layer_output_lengths, layer_shapes

PROFILE_COLUMNS = ("c_in", "c_out", "kernel", "stride", "l_in", "latency_ms", "energy_mj")

DEFAULT_SEGMENT_SECONDS = 5.0
DEFAULT_ACTIVE_HOURS = 12.0


@dataclass(frozen=True)
class OpSignature:
    c_in: int
    c_out: int
    kernel: int
    stride: int
    l_in: int

    def __post_init__(self):
        for field in ("c_in", "c_out", "kernel", "stride", "l_in"):
            if getattr(self, field) < 1:
                raise ValueError(f"op signature field {field} must be positive")
        if self.l_in < self.kernel:
            raise ValueError(f"op signature needs l_in >= kernel, got "
                             f"l_in={self.l_in} < kernel={self.kernel}")


def macs(sig: OpSignature) -> int:
    """Multiply-accumulates of one valid conv layer."""
    l_out = (sig.l_in - sig.kernel) // sig.stride + 1
    return sig.c_in * sig.c_out * sig.kernel * l_out


@dataclass(frozen=True)
class CostEstimate:
    latency_ms: float
    energy_mj: float
    daily_energy_mwh: float


class CostProfile:
    """Operator-signature cost table plus fitted affine fallback.

    Immutable after construction; lookups are exact-match on the signature
    and misses use latency = a_lat * macs + b_lat (likewise energy), clamped
    at zero.
    """

    def __init__(self, rows: dict[OpSignature, tuple[float, float]],
                 coefficients: tuple[float, float, float, float] | None = None):
        for sig, (lat, en) in rows.items():
            if lat < 0 or en < 0:
                raise ValueError(f"negative cost for {sig}")
        self._rows = dict(rows)
        if coefficients is None:
            coefficients = _fit_affine(self._rows)
        a_lat, b_lat, a_en, b_en = (float(c) for c in coefficients)
        if not all(np.isfinite([a_lat, b_lat, a_en, b_en])):
            raise ValueError("fallback coefficients must be finite")
        self.a_lat, self.b_lat, self.a_en, self.b_en = a_lat, b_lat, a_en, b_en

    @staticmethod
    def from_rows(rows) -> "CostProfile":
        return CostProfile(dict(rows))

    @staticmethod
    def analytic(a_lat: float, b_lat: float = 0.0,
                 a_en: float = 0.0, b_en: float = 0.0) -> "CostProfile":
        """A table-free profile: every query uses the affine model."""
        return CostProfile({}, coefficients=(a_lat, b_lat, a_en, b_en))

    @property
    def rows(self) -> dict[OpSignature, tuple[float, float]]:
        return dict(self._rows)

    def __len__(self):
        return len(self._rows)

    def op_cost(self, sig: OpSignature) -> tuple[float, float]:
        """(latency_ms, energy_mj) for one operator; table hit or fallback."""
        hit = self._rows.get(sig)
        if hit is not None:
            return hit
        m = macs(sig)
        return (max(0.0, self.a_lat * m + self.b_lat),
                max(0.0, self.a_en * m + self.b_en))


def op_cost(profile: CostProfile, sig: OpSignature) -> tuple[float, float]:
    return profile.op_cost(sig)


def _fit_affine(rows) -> tuple[float, float, float, float]:
    if not rows:
        raise ValueError("fitting the fallback requires at least one table row; "
                         "use CostProfile.analytic for a table-free profile")
    m = np.array([macs(sig) for sig in rows], dtype=np.float64)
    lat = np.array([v[0] for v in rows.values()], dtype=np.float64)
    en = np.array([v[1] for v in rows.values()], dtype=np.float64)
    design = np.stack([m, np.ones_like(m)], axis=1)
    (a_lat, b_lat), *_ = np.linalg.lstsq(design, lat, rcond=None)
    (a_en, b_en), *_ = np.linalg.lstsq(design, en, rcond=None)
    return float(a_lat), float(b_lat), float(a_en), float(b_en)


def op_signatures(space: SearchSpace, config: SubnetConfig,
                  input_len: int) -> tuple[OpSignature, ...]:
    """Signatures of every conv layer of a config at a given input length."""
    layers = layer_shapes(space, config)
    lengths = layer_output_lengths(layers, input_len)
    sigs = []
    L = input_len
    for ly, l_out in zip(layers, lengths):
        sigs.append(OpSignature(ly.c_in, ly.c_out, ly.kernel, ly.stride, L))
        L = l_out
    return tuple(sigs)


def duty_cycle_factor(segment_seconds: float = DEFAULT_SEGMENT_SECONDS,
                      active_hours: float = DEFAULT_ACTIVE_HOURS) -> float:
    """Inferences per active period divided by 3600: mJ -> mWh per day."""
    return (active_hours * 3600.0 / segment_seconds) / 3600.0


def cost_of_ops(profile: CostProfile, sigs,
                segment_seconds: float = DEFAULT_SEGMENT_SECONDS,
                active_hours: float = DEFAULT_ACTIVE_HOURS) -> CostEstimate:
    """Sum op costs and apply the duty-cycle model; empty op list costs zero."""
    latency = 0.0
    energy = 0.0
    for sig in sigs:
        lat, en = profile.op_cost(sig)
        latency += lat
        energy += en
    daily = energy * duty_cycle_factor(segment_seconds, active_hours)
    return CostEstimate(latency_ms=latency, energy_mj=energy, daily_energy_mwh=daily)


def model_cost(profile: CostProfile, space: SearchSpace, config: SubnetConfig,
               input_len: int,
               segment_seconds: float = DEFAULT_SEGMENT_SECONDS,
               active_hours: float = DEFAULT_ACTIVE_HOURS) -> CostEstimate:
    """Total cost of one config's conv layers at a given input length."""
    return cost_of_ops(profile, op_signatures(space, config, input_len),
                       segment_seconds, active_hours)


def bottleneck_fraction(profile: CostProfile, space: SearchSpace,
                        config: SubnetConfig, input_len: int) -> float:
    """Largest single-op latency share of the whole model, in (0, 1]."""
    lats = [profile.op_cost(sig)[0] for sig in op_signatures(space, config, input_len)]
    total = sum(lats)
    if total <= 0.0:
        return 1.0
    return max(lats) / total


def save_profile(path, profile: CostProfile):
    rows = sorted(profile.rows.items(),
                  key=lambda kv: (kv[0].c_in, kv[0].c_out, kv[0].kernel,
                                  kv[0].stride, kv[0].l_in))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(PROFILE_COLUMNS) + "\n")
        for sig, (lat, en) in rows:
            fh.write(f"{sig.c_in},{sig.c_out},{sig.kernel},{sig.stride},"
                     f"{sig.l_in},{lat!r},{en!r}\n")


def load_profile(path) -> CostProfile:
    """Parse the delimited profile table; rejects unknown columns."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"profile {path}: empty file (header row required)")
    header = [h.strip() for h in lines[0].split(",")]
    unknown = [h for h in header if h not in PROFILE_COLUMNS]
    if unknown:
        raise ValueError(f"profile {path}: unknown columns {unknown}")
    missing = [c for c in PROFILE_COLUMNS if c not in header]
    if missing:
        raise ValueError(f"profile {path}: missing columns {missing}")
    idx = {name: header.index(name) for name in PROFILE_COLUMNS}
    rows = {}
    for ln_no, line in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != len(header):
            raise ValueError(f"profile {path}:{ln_no}: expected {len(header)} fields")
        try:
            sig = OpSignature(*(int(parts[idx[c]]) for c in PROFILE_COLUMNS[:5]))
            lat = float(parts[idx["latency_ms"]])
            en = float(parts[idx["energy_mj"]])
        except ValueError as exc:
            raise ValueError(f"profile {path}:{ln_no}: {exc}") from None
        rows[sig] = (lat, en)
    return CostProfile(rows)


# Reference profile calibration. Anchored so the mid-sized config of the
# default space processes a 5 s / 16 kHz segment in ~50 ms and ~40 mWh per
# 12 h day, with a fixed per-op overhead; used for ordering checks only.
_REF_ANCHOR_LATENCY_MS = 50.0
_REF_ANCHOR_DAILY_MWH = 40.0
_REF_B_LAT = 0.5
_REF_B_EN = 0.2
_REF_INPUT_LENS = (80000, 8000)


def _reference_coefficients() -> tuple[float, float, float, float]:
    from .space import default_search_space, mid_config

    space = default_search_space()
    sigs = op_signatures(space, mid_config(space), _REF_INPUT_LENS[0])
    total_macs = sum(macs(s) for s in sigs)
    n_ops = len(sigs)
    a_lat = (_REF_ANCHOR_LATENCY_MS - n_ops * _REF_B_LAT) / total_macs
    anchor_mj = _REF_ANCHOR_DAILY_MWH / duty_cycle_factor()
    a_en = (anchor_mj - n_ops * _REF_B_EN) / total_macs
    return a_lat, _REF_B_LAT, a_en, _REF_B_EN


def _reference_rows() -> dict[OpSignature, tuple[float, float]]:
    from .space import default_search_space, max_config, mid_config, min_config

    space = default_search_space()
    a_lat, b_lat, a_en, b_en = _reference_coefficients()
    rows = {}
    for cfg in (min_config(space), mid_config(space), max_config(space)):
        for l_in in _REF_INPUT_LENS:
            for sig in op_signatures(space, cfg, l_in):
                m = macs(sig)
                rows[sig] = (a_lat * m + b_lat, a_en * m + b_en)
    return rows


def reference_profile() -> CostProfile:
    """The bundled calibrated profile shipped with the package."""
    from importlib import resources

    with resources.as_file(
            resources.files("headcount").joinpath("data/reference_profile.csv")) as p:
        return load_profile(p)
