"""Round-to-nearest group quantization, 3/4-bit packing, and protection.

Weights are quantized per output row in groups of consecutive input
channels. Each group stores an unsigned code per weight plus one scale and
one zero-point; the quantization range is the group's min/max extended to
include zero so the zero-point always fits the unsigned code range.

Two representation details keep quantize(dequantize(q)) an exact identity:
scales are rounded up onto a 19-bit-mantissa grid (so every code-times-
scale product is exact in float32), and groups whose codes collapse to a
single value are stored in a canonical constant form that reconstructs the
constant exactly.

Mixed precision: a bitmask marks protected input channels whose original
float32 columns are stored verbatim and restored bit-exactly on
dequantization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import TensorMap

# scale mantissa width: 19 bits + 4-bit codes keeps products exact in f32
_SCALE_MANTISSA_BITS = 19
_MAX_RESCALE_ITERS = 64


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 3
    group_size: int = 128
    protect_fraction: float = 0.0

    def __post_init__(self) -> None:
        if not 1 <= self.bits <= 8:
            raise ValueError("bits must be in [1, 8]")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if not 0.0 <= self.protect_fraction <= 1.0:
            raise ValueError("protect_fraction must be in [0, 1]")


@dataclass
class QuantizedTensor:
    module: str
    bits: int
    group_size: int
    codes: np.ndarray  # uint8 [out, in], one code per weight
    scales: np.ndarray  # float32 [out, n_groups]
    zero_points: np.ndarray  # uint8 [out, n_groups]
    channel_scale: np.ndarray  # float32 [in]
    protected: np.ndarray  # bool [in]
    protected_values: np.ndarray  # float32 [out, n_protected], unscaled

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]


def _round_scale_up(x: np.ndarray) -> np.ndarray:
    """Round positive values up onto the reduced-mantissa float grid."""
    m, e = np.frexp(np.asarray(x, dtype=np.float64))
    step = 2.0 ** _SCALE_MANTISSA_BITS
    return np.ldexp(np.ceil(m * step) / step, e)


def _round_scale_down(x: np.ndarray) -> np.ndarray:
    m, e = np.frexp(np.asarray(x, dtype=np.float64))
    step = 2.0 ** _SCALE_MANTISSA_BITS
    return np.ldexp(np.floor(m * step) / step, e)


def _quantize_groups(
    values: np.ndarray, bits: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize one [rows, width] group slab.

    Returns (codes u8, scales f32, zero_points u8). The scale is chosen so
    that re-quantizing the reconstruction reproduces codes, scales, and
    zero-points bit-exactly: the achieved code span must regenerate the
    stored scale, and when a double rounding leaves the span one short the
    scale is stepped down one grid ulp and the group re-coded.
    """
    k = (1 << bits) - 1
    v64 = values.astype(np.float64)
    lo = v64.min(axis=1)
    hi = v64.max(axis=1)
    const = hi == lo
    lo_ext = np.minimum(lo, 0.0)
    hi_ext = np.maximum(hi, 0.0)
    spread = np.where(const, 1.0, (hi_ext - lo_ext) / k)
    scales = _round_scale_up(spread).astype(np.float32)

    codes = np.zeros(values.shape, dtype=np.int64)
    zeros = np.zeros(values.shape[0], dtype=np.int64)
    cmin = np.zeros(values.shape[0], dtype=np.int64)
    cmax = np.zeros(values.shape[0], dtype=np.int64)
    for _ in range(_MAX_RESCALE_ITERS):
        s64 = scales.astype(np.float64)
        zeros = np.clip(np.rint(-lo_ext / s64), 0, k).astype(np.int64)
        codes = np.clip(np.rint(v64 / s64[:, None]) + zeros[:, None], 0, k).astype(np.int64)
        cmax = codes.max(axis=1)
        cmin = codes.min(axis=1)
        span = np.maximum(cmax - zeros, 0) + np.maximum(zeros - cmin, 0)
        unstable = ~const & (cmax != cmin) & (span != k)
        if not unstable.any():
            break
        bumped = _round_scale_down(scales.astype(np.float64) * (1.0 - 2.0**-20))
        scales = np.where(unstable, bumped, scales.astype(np.float64)).astype(np.float32)

    # canonical constant form: reconstructs the group constant exactly
    collapsed = const | (cmax == cmin)
    if collapsed.any():
        value = np.where(
            const,
            lo.astype(np.float32),
            (cmax - zeros).astype(np.float32) * scales,
        ).astype(np.float32)
        is_zero = collapsed & (value == 0)
        nonzero = collapsed & (value != 0)
        scales = np.where(is_zero, np.float32(1.0), np.where(nonzero, value, scales))
        scales = scales.astype(np.float32)
        zeros = np.where(collapsed, 0, zeros)
        codes = np.where(
            is_zero[:, None], 0, np.where(nonzero[:, None], 1, codes)
        )
    return codes.astype(np.uint8), scales, zeros.astype(np.uint8)


def _group_slices(in_features: int, group_size: int) -> list[slice]:
    return [slice(c, min(c + group_size, in_features)) for c in range(0, in_features, group_size)]


def rtn_quantize(
    weight: np.ndarray,
    cfg: QuantConfig,
    *,
    channel_scale: np.ndarray | None = None,
    protected: np.ndarray | None = None,
    module: str = "",
) -> QuantizedTensor:
    """Round-to-nearest group quantization of one linear weight.

    ``channel_scale`` multiplies weight columns before quantization and is
    divided back out at dequantization. ``protected`` marks input channels
    whose original (unscaled) columns are kept in float32 and restored
    bit-exactly.
    """
    weight = np.ascontiguousarray(weight, dtype=np.float32)
    if weight.ndim != 2:
        raise ValueError("weight must be a [out, in] matrix")
    if not np.isfinite(weight).all():
        raise ValueError("weight contains non-finite values")
    out_features, in_features = weight.shape

    if channel_scale is None:
        cscale = np.ones(in_features, dtype=np.float32)
    else:
        cscale = np.ascontiguousarray(channel_scale, dtype=np.float32)
        if cscale.shape != (in_features,):
            raise ValueError("channel_scale length must match in_features")
        if not np.isfinite(cscale).all() or (cscale <= 0).any():
            raise ValueError("channel_scale entries must be positive and finite")

    if protected is None:
        mask = np.zeros(in_features, dtype=bool)
    else:
        mask = np.ascontiguousarray(protected, dtype=bool)
        if mask.shape != (in_features,):
            raise ValueError("protected mask length must match in_features")

    scaled = weight * cscale
    slices = _group_slices(in_features, cfg.group_size)
    codes = np.empty((out_features, in_features), dtype=np.uint8)
    scales = np.empty((out_features, len(slices)), dtype=np.float32)
    zero_points = np.empty((out_features, len(slices)), dtype=np.uint8)
    for g, sl in enumerate(slices):
        c, s, z = _quantize_groups(scaled[:, sl], cfg.bits)
        codes[:, sl] = c
        scales[:, g] = s
        zero_points[:, g] = z

    return QuantizedTensor(
        module=module,
        bits=cfg.bits,
        group_size=cfg.group_size,
        codes=codes,
        scales=scales,
        zero_points=zero_points,
        channel_scale=cscale,
        protected=mask,
        protected_values=weight[:, mask].copy(),
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct a float32 weight matrix from its quantized form.

    Unprotected channels decode as (code - zero_point) * group scale and
    are divided by the channel scale; protected channels are restored
    verbatim from the stored float32 columns.
    """
    out_features, in_features = q.codes.shape
    slices = _group_slices(in_features, q.group_size)
    if len(slices) != q.n_groups or q.zero_points.shape != q.scales.shape:
        raise ValueError("corrupt quantized tensor: group table mismatch")
    if int(q.protected.sum()) != q.protected_values.shape[1]:
        raise ValueError("corrupt quantized tensor: protected column count mismatch")
    recon = np.empty((out_features, in_features), dtype=np.float32)
    for g, sl in enumerate(slices):
        diff = q.codes[:, sl].astype(np.int32) - q.zero_points[:, g : g + 1].astype(np.int32)
        # integer-times-19-bit-scale products are exact in float32
        recon[:, sl] = diff.astype(np.float32) * q.scales[:, g : g + 1]
    recon /= q.channel_scale
    recon[:, q.protected] = q.protected_values
    if not np.isfinite(recon).all():
        raise ValueError("dequantization produced non-finite values")
    return recon


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack unsigned codes into bytes.

    4-bit: two codes per byte, first code in the low nibble. 3-bit: blocks
    of eight codes become one little-endian 24-bit word (code k occupies
    bits [3k, 3k+3)); the tail is padded with zero codes.
    """
    if bits not in (3, 4):
        raise ValueError("pack_codes supports bits in {3, 4}")
    flat = np.ascontiguousarray(codes, dtype=np.uint8).ravel()
    if flat.size and int(flat.max()) >= (1 << bits):
        raise ValueError(f"code out of range for {bits}-bit packing")
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint8)
    if bits == 4:
        if flat.size % 2:
            flat = np.concatenate([flat, np.zeros(1, dtype=np.uint8)])
        pairs = flat.reshape(-1, 2).astype(np.uint16)
        return (pairs[:, 0] | (pairs[:, 1] << 4)).astype(np.uint8)
    pad = (-flat.size) % 8
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)])
    blocks = flat.reshape(-1, 8).astype(np.uint32)
    words = np.zeros(blocks.shape[0], dtype=np.uint32)
    for i in range(8):
        words |= blocks[:, i] << (3 * i)
    out = np.empty((blocks.shape[0], 3), dtype=np.uint8)
    out[:, 0] = words & 0xFF
    out[:, 1] = (words >> 8) & 0xFF
    out[:, 2] = (words >> 16) & 0xFF
    return out.ravel()


def unpack_codes(buf: np.ndarray, count: int, bits: int) -> np.ndarray:
    """Exact inverse of pack_codes, returning the first ``count`` codes."""
    if bits not in (3, 4):
        raise ValueError("unpack_codes supports bits in {3, 4}")
    if count < 0:
        raise ValueError("count must be >= 0")
    buf = np.ascontiguousarray(buf, dtype=np.uint8).ravel()
    if bits == 4:
        expected = (count + 1) // 2
        if buf.size != expected:
            raise ValueError(f"length mismatch: {buf.size} bytes for {count} 4-bit codes")
        low = buf & 0x0F
        high = buf >> 4
        return np.column_stack([low, high]).ravel()[:count].astype(np.uint8)
    expected = -(-count // 8) * 3
    if buf.size != expected:
        raise ValueError(f"length mismatch: {buf.size} bytes for {count} 3-bit codes")
    if count == 0:
        return np.zeros(0, dtype=np.uint8)
    triples = buf.reshape(-1, 3).astype(np.uint32)
    words = triples[:, 0] | (triples[:, 1] << 8) | (triples[:, 2] << 16)
    out = np.empty((words.shape[0], 8), dtype=np.uint8)
    for i in range(8):
        out[:, i] = (words >> (3 * i)) & 0x7
    return out.ravel()[:count]


def select_protected(importance, fraction: float) -> np.ndarray:
    """Mark the round(fraction * n) highest-importance channels.

    Ties break toward the lower channel index. Accepts an ImportanceVector
    or a plain score array.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    scores = np.asarray(getattr(importance, "scores", importance), dtype=np.float64)
    n = scores.shape[0]
    n_protect = int(round(fraction * n))
    mask = np.zeros(n, dtype=bool)
    if n_protect:
        order = np.argsort(-scores, kind="stable")
        mask[order[:n_protect]] = True
    return mask


def artifact_to_map(
    artifact: dict[str, QuantizedTensor], meta: dict[str, str] | None = None
) -> TensorMap:
    """Serialize quantized modules into a container map."""
    if not artifact:
        raise ValueError("empty artifact")
    first = next(iter(artifact.values()))
    base_meta = {"bits": str(first.bits), "group_size": str(first.group_size)}
    if meta:
        base_meta.update(meta)
    tmap = TensorMap(meta=base_meta)
    for module in sorted(artifact):
        q = artifact[module]
        out_features, in_features = q.shape
        tmap.put_packed(
            f"{module}.codes", pack_codes(q.codes, q.bits), out_features * in_features
        )
        tmap[f"{module}.scales"] = q.scales.astype(np.float32)
        tmap[f"{module}.zeros"] = q.zero_points.astype(np.float32)
        tmap[f"{module}.channel_scale"] = q.channel_scale.astype(np.float32)
        tmap.put_packed(
            f"{module}.protected",
            np.packbits(q.protected.astype(np.uint8), bitorder="little"),
            in_features,
        )
        tmap[f"{module}.protected_values"] = q.protected_values.astype(np.float32)
    return tmap


def artifact_from_map(tmap: TensorMap) -> dict[str, QuantizedTensor]:
    """Rebuild quantized modules from a container map."""
    if "bits" not in tmap.meta or "group_size" not in tmap.meta:
        raise ValueError("artifact container is missing 'bits'/'group_size' meta")
    bits = int(tmap.meta["bits"])
    group_size = int(tmap.meta["group_size"])
    artifact: dict[str, QuantizedTensor] = {}
    for name in tmap.names():
        if not name.endswith(".codes"):
            continue
        module = name[: -len(".codes")]
        scales = tmap[f"{module}.scales"]
        channel_scale = tmap[f"{module}.channel_scale"]
        out_features = scales.shape[0]
        in_features = channel_scale.shape[0]
        n_codes = tmap.elements.get(name, out_features * in_features)
        if n_codes != out_features * in_features:
            raise ValueError(f"corrupt packing length for module {module!r}")
        codes = unpack_codes(tmap[name], n_codes, bits).reshape(out_features, in_features)
        zeros_f = tmap[f"{module}.zeros"]
        zero_points = zeros_f.astype(np.uint8)
        if not np.array_equal(zero_points.astype(np.float32), zeros_f):
            raise ValueError(f"non-integral zero points for module {module!r}")
        prot_bits = tmap[f"{module}.protected"]
        protected = np.unpackbits(prot_bits, bitorder="little")[:in_features].astype(bool)
        artifact[module] = QuantizedTensor(
            module=module,
            bits=bits,
            group_size=group_size,
            codes=codes,
            scales=scales,
            zero_points=zero_points,
            channel_scale=channel_scale,
            protected=protected,
            protected_values=tmap[f"{module}.protected_values"],
        )
    if not artifact:
        raise ValueError("no quantized modules found in container")
    return artifact
