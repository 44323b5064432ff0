"""4-bit NormalFloat block quantization, double quantization, low-rank adapters.

Correctness-first reference implementation in float64 numpy. Everything here
is pure: blocks quantize independently, adapters are value objects, and no
operation mutates a base weight matrix.

NF4 codebook construction: the 16 levels are standard-normal quantiles at
evenly spaced probabilities, 9 over the non-negative half
(``linspace(P_MAX, 0.5, 9)``, last point dropped in favour of an exact zero)
and 8 over the negative half (``linspace(P_MAX, 0.5, 8)``, negated, last
point dropped), all divided by the largest magnitude so the range is exactly
[-1, 1] with a representable 0. P_MAX = 0.9677083 keeps the outer quantiles
finite.

Quantized tensor container layout (all integers little-endian):

========  =======  ====================================================
offset    size     field
========  =======  ====================================================
0         4        magic ``b"NF4T"``
4         4        u32 format version (currently 1)
8         4        u32 block_size (first-level block length)
12        4        u32 block_size2 (second-level block length)
16        4        u32 ndim
20        8*ndim   u64 dims
..        16*8     f64 codebook levels, ascending
..        8        u64 n_values
..        ceil/2   packed 4-bit codes, two per byte, low nibble first
..        4        u32 n_absmax (count of first-level blocks)
..        4        u32 n_blocks2 (count of second-level blocks)
..        16 each  per second-level block: f64 offset, f64 scale
..        n_absmax u8 absmax codes
========  =======  ====================================================
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Callable

import numpy as np

TENSOR_FORMAT_MAGIC = b"NF4T"
TENSOR_FORMAT_VERSION = 1

DEFAULT_BLOCK_SIZE = 64
DEFAULT_BLOCK_SIZE2 = 256

# outermost quantile probability of the codebook construction
P_MAX = 0.9677083


class QuantLoraError(ValueError):
    pass


class EmptyBlock(QuantLoraError):
    pass


class EmptyInput(QuantLoraError):
    pass


class ShapeMismatch(QuantLoraError):
    pass


# ---------------------------------------------------------------------------
# NF4 codebook and block quantization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Nf4Codebook:
    levels: np.ndarray  # 16 strictly increasing floats in [-1, 1]

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=np.float64)
        if lv.shape != (16,):
            raise QuantLoraError(f"codebook needs 16 levels, got shape {lv.shape}")
        if not np.all(np.diff(lv) > 0):
            raise QuantLoraError("codebook levels must be strictly increasing")
        if lv[0] != -1.0 or lv[-1] != 1.0 or not np.any(lv == 0.0):
            raise QuantLoraError("codebook must contain -1, 0 and 1 exactly")
        object.__setattr__(self, "levels", lv)

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.levels == 0.0)[0])

    @property
    def widest_gap(self) -> float:
        return float(np.max(np.diff(self.levels)))


def build_nf4_codebook() -> Nf4Codebook:
    inv_cdf = NormalDist().inv_cdf
    pos = [inv_cdf(p) for p in np.linspace(P_MAX, 0.5, 9)[:-1]]
    neg = [-inv_cdf(p) for p in np.linspace(P_MAX, 0.5, 8)[:-1]]
    levels = np.sort(np.array(neg + [0.0] + pos, dtype=np.float64))
    levels /= np.abs(levels).max()
    return Nf4Codebook(levels=levels)


@dataclass(frozen=True)
class QuantizedBlock:
    codes: np.ndarray  # uint8 values 0..15
    absmax: float
    block_size: int

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        if codes.size > self.block_size:
            raise QuantLoraError(
                f"{codes.size} codes exceed block_size {self.block_size}"
            )
        if codes.size and codes.max() > 15:
            raise QuantLoraError("codes must fit in 4 bits")
        if self.absmax < 0:
            raise QuantLoraError("absmax must be non-negative")
        object.__setattr__(self, "codes", codes)


def quantize_block(
    values, codebook: Nf4Codebook, block_size: int = DEFAULT_BLOCK_SIZE
) -> QuantizedBlock:
    """Nearest-level codes of values/absmax; ties resolve to the lower index."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyBlock("cannot quantize an empty block")
    if v.size > block_size:
        raise QuantLoraError(f"{v.size} values exceed block_size {block_size}")
    absmax = float(np.max(np.abs(v)))
    if absmax == 0.0:
        codes = np.full(v.size, codebook.zero_index, dtype=np.uint8)
    else:
        normalized = v / absmax
        dist = np.abs(normalized[:, None] - codebook.levels[None, :])
        codes = np.argmin(dist, axis=1).astype(np.uint8)
    return QuantizedBlock(codes=codes, absmax=absmax, block_size=block_size)


def dequantize_block(qb: QuantizedBlock, codebook: Nf4Codebook) -> np.ndarray:
    return codebook.levels[qb.codes] * qb.absmax


# ---------------------------------------------------------------------------
# Double quantization of the absmax constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DoubleQuantState:
    codes: np.ndarray  # uint8, one per first-level absmax
    offsets: np.ndarray  # f64 per second-level block
    scales: np.ndarray  # f64 per second-level block
    block_size2: int
    n_absmax: int


def double_quantize(
    absmaxes, block_size2: int = DEFAULT_BLOCK_SIZE2
) -> DoubleQuantState:
    """8-bit affine quantization of absmax constants per second-level block."""
    a = np.asarray(absmaxes, dtype=np.float64).ravel()
    if a.size == 0:
        raise EmptyInput("no absmax constants")
    if np.any(a < 0):
        raise QuantLoraError("absmax constants must be non-negative")
    codes = np.empty(a.size, dtype=np.uint8)
    offsets, scales = [], []
    for start in range(0, a.size, block_size2):
        chunk = a[start : start + block_size2]
        lo = float(chunk.min())
        hi = float(chunk.max())
        scale = (hi - lo) / 255.0
        if scale == 0.0:
            codes[start : start + block_size2] = 0
        else:
            q = np.rint((chunk - lo) / scale)
            codes[start : start + block_size2] = np.clip(q, 0, 255).astype(np.uint8)
        offsets.append(lo)
        scales.append(scale)
    return DoubleQuantState(
        codes=codes,
        offsets=np.array(offsets, dtype=np.float64),
        scales=np.array(scales, dtype=np.float64),
        block_size2=block_size2,
        n_absmax=a.size,
    )


def double_dequantize(state: DoubleQuantState) -> np.ndarray:
    out = np.empty(state.n_absmax, dtype=np.float64)
    for k in range(len(state.offsets)):
        start = k * state.block_size2
        stop = min(start + state.block_size2, state.n_absmax)
        out[start:stop] = state.offsets[k] + state.codes[start:stop] * state.scales[k]
    return out


# ---------------------------------------------------------------------------
# Whole-tensor quantization and the on-disk container
# ---------------------------------------------------------------------------


@dataclass
class QuantizedTensor:
    shape: tuple[int, ...]
    codes: np.ndarray  # uint8 per element, 0..15
    dq_state: DoubleQuantState
    codebook: Nf4Codebook
    block_size: int
    block_size2: int


def quantize_tensor(
    arr,
    codebook: Nf4Codebook | None = None,
    block_size: int = DEFAULT_BLOCK_SIZE,
    block_size2: int = DEFAULT_BLOCK_SIZE2,
) -> QuantizedTensor:
    if codebook is None:
        codebook = build_nf4_codebook()
    a = np.asarray(arr, dtype=np.float64)
    if a.size == 0:
        raise EmptyInput("cannot quantize an empty tensor")
    flat = a.ravel()
    codes = np.empty(flat.size, dtype=np.uint8)
    absmaxes = []
    for start in range(0, flat.size, block_size):
        qb = quantize_block(flat[start : start + block_size], codebook, block_size)
        codes[start : start + qb.codes.size] = qb.codes
        absmaxes.append(qb.absmax)
    dq_state = double_quantize(absmaxes, block_size2)
    return QuantizedTensor(
        shape=a.shape,
        codes=codes,
        dq_state=dq_state,
        codebook=codebook,
        block_size=block_size,
        block_size2=block_size2,
    )


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    absmaxes = double_dequantize(qt.dq_state)
    values = qt.codebook.levels[qt.codes]
    for k, absmax in enumerate(absmaxes):
        start = k * qt.block_size
        values[start : start + qt.block_size] *= absmax
    return values.reshape(qt.shape)


def _pack_nibbles(codes: np.ndarray) -> bytes:
    padded = codes
    if padded.size % 2:
        padded = np.concatenate([padded, np.zeros(1, dtype=np.uint8)])
    low = padded[0::2]
    high = padded[1::2]
    return ((high << 4) | low).astype(np.uint8).tobytes()


def _unpack_nibbles(data: bytes, n: int) -> np.ndarray:
    raw = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(raw.size * 2, dtype=np.uint8)
    out[0::2] = raw & 0x0F
    out[1::2] = raw >> 4
    return out[:n]


def save_quantized(qt: QuantizedTensor, path: str | Path) -> None:
    parts = [
        TENSOR_FORMAT_MAGIC,
        struct.pack("<IIII", TENSOR_FORMAT_VERSION, qt.block_size, qt.block_size2, len(qt.shape)),
        struct.pack(f"<{len(qt.shape)}Q", *qt.shape),
        qt.codebook.levels.astype("<f8").tobytes(),
        struct.pack("<Q", qt.codes.size),
        _pack_nibbles(qt.codes),
        struct.pack("<II", qt.dq_state.n_absmax, len(qt.dq_state.offsets)),
    ]
    for off, sc in zip(qt.dq_state.offsets, qt.dq_state.scales):
        parts.append(struct.pack("<dd", off, sc))
    parts.append(qt.dq_state.codes.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_quantized(path: str | Path) -> QuantizedTensor:
    data = Path(path).read_bytes()
    if data[:4] != TENSOR_FORMAT_MAGIC:
        raise QuantLoraError(f"bad magic {data[:4]!r}")
    version, block_size, block_size2, ndim = struct.unpack_from("<IIII", data, 4)
    if version != TENSOR_FORMAT_VERSION:
        raise QuantLoraError(f"unsupported tensor format version {version}")
    pos = 20
    shape = struct.unpack_from(f"<{ndim}Q", data, pos)
    pos += 8 * ndim
    levels = np.frombuffer(data, dtype="<f8", count=16, offset=pos).copy()
    pos += 16 * 8
    (n_values,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    n_packed = (n_values + 1) // 2
    codes = _unpack_nibbles(data[pos : pos + n_packed], n_values)
    pos += n_packed
    n_absmax, n_blocks2 = struct.unpack_from("<II", data, pos)
    pos += 8
    offsets = np.empty(n_blocks2)
    scales = np.empty(n_blocks2)
    for k in range(n_blocks2):
        offsets[k], scales[k] = struct.unpack_from("<dd", data, pos)
        pos += 16
    dq_codes = np.frombuffer(data, dtype=np.uint8, count=n_absmax, offset=pos).copy()
    return QuantizedTensor(
        shape=tuple(int(s) for s in shape),
        codes=codes,
        dq_state=DoubleQuantState(
            codes=dq_codes,
            offsets=offsets,
            scales=scales,
            block_size2=block_size2,
            n_absmax=n_absmax,
        ),
        codebook=Nf4Codebook(levels=levels),
        block_size=block_size,
        block_size2=block_size2,
    )


# ---------------------------------------------------------------------------
# Low-rank adapters
# ---------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    A: np.ndarray  # r x d_in
    B: np.ndarray  # d_out x r
    r: int
    alpha: float
    dropout_p: float = 0.0

    def __post_init__(self):
        if self.r < 1:
            raise QuantLoraError(f"rank must be >= 1, got {self.r}")
        if self.alpha <= 0:
            raise QuantLoraError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise QuantLoraError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.A.shape[0] != self.r or self.B.shape[1] != self.r:
            raise ShapeMismatch(
                f"A {self.A.shape} / B {self.B.shape} inconsistent with rank {self.r}"
            )

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]


def init_adapter(
    d_in: int,
    d_out: int,
    r: int,
    alpha: float,
    dropout_p: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LoraAdapter:
    """A gets small uniform noise, B starts at zero so the delta is exactly 0."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    bound = 1.0 / np.sqrt(d_in)
    return LoraAdapter(
        A=rng.uniform(-bound, bound, size=(r, d_in)),
        B=np.zeros((d_out, r)),
        r=r,
        alpha=alpha,
        dropout_p=dropout_p,
    )


def _dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(shape) >= p
    return keep.astype(np.float64) / (1.0 - p)


def lora_apply(
    x,
    base: np.ndarray,
    adapter: LoraAdapter,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """y = base @ x + (alpha/r) * B @ (A @ drop(x)); drop is identity in eval."""
    x = np.asarray(x, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if base.shape != (adapter.d_out, adapter.d_in):
        raise ShapeMismatch(
            f"base {base.shape} vs adapter ({adapter.d_out}, {adapter.d_in})"
        )
    if x.shape[0] != adapter.d_in:
        raise ShapeMismatch(f"x has leading dim {x.shape[0]}, expected {adapter.d_in}")
    xd = x
    if training and adapter.dropout_p > 0.0:
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(0))
        xd = x * _dropout_mask(x.shape, adapter.dropout_p, rng)
    return base @ x + adapter.scaling * (adapter.B @ (adapter.A @ xd))


def merge_adapter(base: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """base + (alpha/r) * B @ A. Merging twice adds the delta twice."""
    base = np.asarray(base, dtype=np.float64)
    if base.shape != (adapter.d_out, adapter.d_in):
        raise ShapeMismatch(
            f"base {base.shape} vs adapter ({adapter.d_out}, {adapter.d_in})"
        )
    return base + adapter.scaling * (adapter.B @ adapter.A)


def lora_grads(
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x,
    base: np.ndarray,
    adapter: LoraAdapter,
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic (dL/dA, dL/dB) at y = lora_apply(x, base, adapter).

    `loss` maps the output vector to (value, dL/dy). The base matrix is
    frozen: its gradient is zero by construction and it is never touched.
    """
    x = np.asarray(x, dtype=np.float64)
    y = lora_apply(x, base, adapter, training=False)
    _, g = loss(y)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != y.shape:
        raise ShapeMismatch(f"loss gradient {g.shape} vs output {y.shape}")
    s = adapter.scaling
    if x.ndim == 1:
        dB = s * np.outer(g, adapter.A @ x)
        dA = s * np.outer(adapter.B.T @ g, x)
    else:
        dB = s * g @ (adapter.A @ x).T
        dA = s * (adapter.B.T @ g) @ x.T
    return dA, dB
