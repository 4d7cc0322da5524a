"""Weight-update deltas and per-channel importance signals.

A fine-tuning delta is the element-wise absolute difference between a
post- and a pre-fine-tuned checkpoint. Global statistics of all deltas
(smallest positive, median of positives, maximum) anchor a two-branch
restricted quadratic that assigns maximal importance to the smallest and
largest updates ("protect both ends") and minimal importance to the
median. Variants: the reflected mapping that protects intermediate
magnitudes instead, a zero-aware mapping that pins exactly-zero updates to
the minimum score and fits the left branch on positive updates only, and a
zero-count amplifier that multiplies a channel's mean score by one plus
its (optionally band-averaged) count of zero updates. Activation-based
signals from a calibration set serve as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import TensorMap, check_compatible
from .toy import CalibrationSet

SIGNALS = ("magnitude", "both_ends", "both_ends_zero", "mid", "activation_sq")

# importance must stay strictly positive; dead activation channels would
# otherwise produce exact zeros and break the scaling search
_SCORE_FLOOR = 1e-12


class DegenerateDeltasError(Exception):
    """Every weight update is zero; no statistics can be derived."""


@dataclass(frozen=True)
class MappingConfig:
    signal: str = "both_ends_zero"
    y_min: float = 1.0
    y_max: float = 10.0
    zero_epsilon: float = 0.0
    slices: int = 1
    multiply_activation: bool = False

    def __post_init__(self) -> None:
        if self.signal not in SIGNALS:
            raise ValueError(f"unknown signal {self.signal!r}; expected one of {SIGNALS}")
        if not (self.y_max > self.y_min > 0):
            raise ValueError("need y_max > y_min > 0")
        if self.zero_epsilon < 0:
            raise ValueError("zero_epsilon must be >= 0")
        if self.slices < 1:
            raise ValueError("slices must be >= 1")


@dataclass(frozen=True)
class DeltaStats:
    """Global statistics of all weight updates across every module."""

    min_positive: float
    median_positive: float
    max: float
    zero_count: int
    total_count: int

    @property
    def zero_fraction(self) -> float:
        return self.zero_count / self.total_count

    @property
    def min_including_zeros(self) -> float:
        return 0.0 if self.zero_count > 0 else self.min_positive


@dataclass
class ImportanceVector:
    """Per-input-channel importance scores for one linear module."""

    module: str
    scores: np.ndarray  # [in_features] float64, strictly positive
    config: MappingConfig


def compute_delta(pre: TensorMap, post: TensorMap) -> TensorMap:
    """Element-wise |post - pre| of every '.weight' tensor."""
    check_compatible(pre, post)
    out = TensorMap()
    for name in pre.names():
        if name.endswith(".weight"):
            out[name] = np.abs(
                post[name].astype(np.float32) - pre[name].astype(np.float32)
            )
    return out


def global_delta_stats(deltas: TensorMap, zero_epsilon: float = 0.0) -> DeltaStats:
    """Pool all module deltas and extract min/median/max of the positives.

    Updates at or below ``zero_epsilon`` count as zero and are excluded
    from the minimum and the median. The median is the lower middle
    element of the sorted positives for even counts.
    """
    if len(deltas) == 0:
        raise ValueError("deltas map is empty")
    vals = np.concatenate(
        [deltas[name].ravel().astype(np.float64) for name in deltas.names()]
    )
    positives = np.sort(vals[vals > zero_epsilon])
    total = vals.size
    zeros = total - positives.size
    if positives.size == 0:
        raise DegenerateDeltasError(
            "degenerate deltas: all weight updates are zero"
        )
    return DeltaStats(
        min_positive=float(positives[0]),
        median_positive=float(positives[(positives.size - 1) // 2]),
        max=float(positives[-1]),
        zero_count=int(zeros),
        total_count=int(total),
    )


def _restricted_quadratic(delta, lo: float, mid: float, hi: float, y_min: float, y_max: float):
    """Two-branch quadratic: y_max at both ends, y_min at the median.

    delta may be a scalar or an ndarray; values outside [lo, hi] are
    clamped. A collapsed branch (zero width) returns y_max at its point.
    """
    d = np.minimum(np.maximum(np.asarray(delta, dtype=np.float64), lo), hi)
    amp = y_max - y_min
    if mid - lo > 0:
        left = y_min + amp * ((mid - d) / (mid - lo)) ** 2
    else:
        left = np.full_like(d, y_max)
    if hi - mid > 0:
        right = y_min + amp * ((d - mid) / (hi - mid)) ** 2
    else:
        right = np.full_like(d, y_max)
    return np.where(d <= mid, left, right)


def _as_input_kind(values: np.ndarray, original) -> float | np.ndarray:
    if np.isscalar(original) or np.ndim(original) == 0:
        return float(values)
    return values


def map_both_ends(delta, stats: DeltaStats, cfg: MappingConfig):
    """Both-ends quadratic with no special zero handling.

    The left anchor is the global minimum including zeros, so when any
    zero update exists f(0) = y_max. Accepts scalars or arrays.
    """
    out = _restricted_quadratic(
        delta, stats.min_including_zeros, stats.median_positive, stats.max,
        cfg.y_min, cfg.y_max,
    )
    return _as_input_kind(out, delta)


def map_both_ends_zero(delta, stats: DeltaStats, cfg: MappingConfig):
    """Zero-excluded both-ends quadratic.

    Exactly-zero updates (<= cfg.zero_epsilon) score y_min; the left
    branch is anchored at the smallest positive update instead of zero,
    so f(min_positive) = f(max) = y_max and f(median) = y_min.
    """
    d = np.asarray(delta, dtype=np.float64)
    out = _restricted_quadratic(
        d, stats.min_positive, stats.median_positive, stats.max,
        cfg.y_min, cfg.y_max,
    )
    out = np.where(d <= cfg.zero_epsilon, cfg.y_min, out)
    return _as_input_kind(out, delta)


def map_mid(delta, stats: DeltaStats, cfg: MappingConfig):
    """Reflection of the both-ends mapping: protects intermediate updates.

    map_mid(d) + map_both_ends(d) == y_min + y_max for every d.
    """
    out = (cfg.y_min + cfg.y_max) - np.asarray(
        map_both_ends(delta, stats, cfg), dtype=np.float64
    )
    return _as_input_kind(out, delta)


def count_zeros_per_channel(
    delta: np.ndarray, zero_epsilon: float = 0.0, slices: int = 1
) -> np.ndarray:
    """Mean per-band zero-update count for each input channel.

    Rows are split into ``slices`` contiguous bands (sizes differ by at
    most one; later bands may be smaller) and the zero count of each
    channel is averaged across bands. With slices=1 this is the plain
    per-channel zero count.
    """
    delta = np.asarray(delta)
    if delta.ndim != 2:
        raise ValueError("delta must be a [out, in] matrix")
    rows = delta.shape[0]
    if slices < 1 or slices > rows:
        raise ValueError(f"slices must be in [1, {rows}], got {slices}")
    counts = np.zeros(delta.shape[1], dtype=np.float64)
    for band in np.array_split(delta, slices, axis=0):
        counts += (band <= zero_epsilon).sum(axis=0)
    return counts / slices


def importance(
    module: str,
    weight_delta: np.ndarray,
    stats: DeltaStats,
    cfg: MappingConfig,
    calib: CalibrationSet | None = None,
) -> ImportanceVector:
    """Per-input-channel importance of one module under a chosen signal.

    magnitude        mean |update| down each column
    activation_sq    mean squared calibration input per channel
    both_ends        column mean of the both-ends quadratic
    mid              column mean of the reflected quadratic
    both_ends_zero   column mean of the zero-excluded quadratic times
                     (mean zero count per band + 1)

    With ``multiply_activation`` the result is further scaled by the mean
    absolute calibration input. Scores are clamped to a tiny positive
    floor so they can serve as scaling-factor bases.
    """
    delta = np.asarray(weight_delta, dtype=np.float64)
    if delta.ndim != 2:
        raise ValueError("weight_delta must be a [out, in] matrix")
    needs_calib = cfg.signal == "activation_sq" or cfg.multiply_activation
    if needs_calib and (calib is None or module not in calib.mean_abs):
        raise ValueError(f"signal requires calibration inputs for module {module!r}")

    if cfg.signal == "magnitude":
        scores = delta.mean(axis=0)
    elif cfg.signal == "activation_sq":
        scores = calib.mean_square[module].astype(np.float64)
        if scores.shape[0] != delta.shape[1]:
            raise ValueError(f"calibration width mismatch for module {module!r}")
    elif cfg.signal == "both_ends":
        scores = map_both_ends(delta, stats, cfg).mean(axis=0)
    elif cfg.signal == "mid":
        scores = map_mid(delta, stats, cfg).mean(axis=0)
    else:  # both_ends_zero
        mapped = map_both_ends_zero(delta, stats, cfg).mean(axis=0)
        zbar = count_zeros_per_channel(delta, cfg.zero_epsilon, cfg.slices)
        scores = mapped * (zbar + 1.0)

    if cfg.multiply_activation:
        scores = scores * calib.mean_abs[module].astype(np.float64)
    scores = np.maximum(scores, _SCORE_FLOOR)
    return ImportanceVector(module=module, scores=scores, config=cfg)


def importance_all(
    pre: TensorMap,
    post: TensorMap,
    cfg: MappingConfig,
    calib: CalibrationSet | None = None,
) -> dict[str, ImportanceVector]:
    """Compute importance for every linear module of a checkpoint pair.

    One global DeltaStats, pooled over all modules, anchors the mappings
    for every module.
    """
    deltas = compute_delta(pre, post)
    stats = global_delta_stats(deltas, cfg.zero_epsilon)
    result: dict[str, ImportanceVector] = {}
    for name in deltas.names():
        module = name[: -len(".weight")]
        result[module] = importance(module, deltas[name], stats, cfg, calib)
    return result


def importances_to_map(imps: dict[str, ImportanceVector]) -> TensorMap:
    """Serialize importance vectors as a container map with config meta."""
    if not imps:
        raise ValueError("no importance vectors to save")
    cfg = next(iter(imps.values())).config
    meta = {
        "signal": cfg.signal,
        "y_min": repr(cfg.y_min),
        "y_max": repr(cfg.y_max),
        "zero_epsilon": repr(cfg.zero_epsilon),
        "slices": str(cfg.slices),
        "multiply_activation": "true" if cfg.multiply_activation else "false",
    }
    tmap = TensorMap(meta=meta)
    for module in sorted(imps):
        tmap[f"{module}.importance"] = imps[module].scores.astype(np.float32)
    return tmap


def importances_from_map(tmap: TensorMap) -> dict[str, ImportanceVector]:
    cfg = MappingConfig(
        signal=tmap.meta.get("signal", "both_ends_zero"),
        y_min=float(tmap.meta.get("y_min", "1.0")),
        y_max=float(tmap.meta.get("y_max", "10.0")),
        zero_epsilon=float(tmap.meta.get("zero_epsilon", "0.0")),
        slices=int(tmap.meta.get("slices", "1")),
        multiply_activation=tmap.meta.get("multiply_activation", "false") == "true",
    )
    out: dict[str, ImportanceVector] = {}
    for name in tmap.names():
        if name.endswith(".importance"):
            module = name[: -len(".importance")]
            scores = np.maximum(tmap[name].astype(np.float64), _SCORE_FLOOR)
            out[module] = ImportanceVector(module=module, scores=scores, config=cfg)
    return out
