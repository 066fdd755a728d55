"""Group-wise low-bit min-max quantization of K/V matrices.

Supports the two grouping layouts used by KV-cache quantizers: per-token
(groups run along the channel axis inside one token row, FlexGen style) and
per-channel (groups run along the token axis inside one channel column, the
KIVI key layout). Elements whose magnitude exceeds an optional threshold are
kept at full precision in a sparse sidecar instead of being grouped.

Each group of values ``G`` is stored as ``round((G - z) / s)`` with
``z = min(G)``, ``s = (max(G) - min(G)) / (2**bits - 1)``; codes are packed
little-endian at the configured bit width, each group starting on a byte
boundary. Constant groups take ``s = 0`` and all-zero codes, and dequantize
back to ``z`` exactly.

Byte accounting convention (used for every budget-parity figure in the
package): packed code bytes, plus 2 bytes of scale/zero metadata per group,
plus 6 bytes per outlier (4-byte packed position, 2-byte value charge).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ContractViolation, IntegrityError
from .tensor import Matrix

SUPPORTED_BITS = (2, 4, 8)

GROUP_METADATA_BYTES = 2
OUTLIER_BYTES = 6


class Layout(str, Enum):
    """Grouping direction for a single matrix."""

    PER_TOKEN = "per_token"
    PER_CHANNEL = "per_channel"


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    group_size: int = 64
    layout: Layout = Layout.PER_TOKEN
    outlier_threshold: float | None = None

    def __post_init__(self) -> None:
        if self.bits not in SUPPORTED_BITS:
            raise ContractViolation(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ContractViolation("group_size must be >= 1")
        if self.outlier_threshold is not None and self.outlier_threshold < 0:
            raise ContractViolation("outlier_threshold must be nonnegative")


@dataclass(frozen=True)
class QuantGroup:
    """One quantized group: integer codes plus its (scale, zero_point) pair."""

    codes: np.ndarray  # uint8, values in [0, 2**bits - 1]
    zero_point: float
    scale: float
    length: int


@dataclass(frozen=True)
class QuantizedTensor:
    """A quantized matrix: ordered groups, packed codes, outlier sidecar.

    ``groups`` hold the per-group metadata and codes in layout order;
    ``packed_codes`` is the canonical bit-packed byte stream (one byte-aligned
    run per group) that ``dequantize_matrix`` decodes. ``outliers`` is sorted
    by (row, col) and stores exact float32 values.
    """

    shape: tuple[int, int]
    bits: int
    group_size: int
    layout: Layout
    groups: tuple[QuantGroup, ...]
    packed_codes: bytes
    outliers: tuple[tuple[int, int, float], ...] = field(default=())

    def __post_init__(self) -> None:
        total = sum(g.length for g in self.groups) + len(self.outliers)
        if total != self.shape[0] * self.shape[1]:
            raise ContractViolation(
                f"group lengths + outliers = {total}, expected {self.shape[0] * self.shape[1]}"
            )


def _pack_rows(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack a (n_groups, length) uint8 code block into (n_groups, n_bytes) bytes.

    Little-endian within each byte: the first code lands in the least
    significant bits. Each group row is padded with zero codes to a byte
    boundary.
    """
    per_byte = 8 // bits
    n, length = codes.shape
    pad = (-length) % per_byte
    if pad:
        codes = np.concatenate(
            [codes, np.zeros((n, pad), dtype=np.uint8)], axis=1
        )
    shifts = (np.arange(per_byte, dtype=np.uint16) * bits)[None, None, :]
    chunks = codes.reshape(n, -1, per_byte).astype(np.uint16)
    return (chunks << shifts).sum(axis=2).astype(np.uint8)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Bit-pack one group's codes (see module docstring for the format)."""
    return _pack_rows(np.asarray(codes, dtype=np.uint8).reshape(1, -1), bits).tobytes()


def unpack_codes(buf: bytes, bits: int, count: int) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns exactly ``count`` codes."""
    per_byte = 8 // bits
    need = (count + per_byte - 1) // per_byte
    if len(buf) != need:
        raise IntegrityError(f"packed group is {len(buf)} bytes, expected {need}")
    raw = np.frombuffer(buf, dtype=np.uint8)
    shifts = np.arange(per_byte, dtype=np.uint8) * bits
    mask = (1 << bits) - 1
    codes = (raw[:, None] >> shifts[None, :]) & mask
    return codes.reshape(-1)[:count].astype(np.uint8)


def group_byte_length(length: int, bits: int) -> int:
    return (length * bits + 7) // 8


def quantize_group(values, bits: int) -> QuantGroup:
    """Min-max quantize one group of finite values to ``bits``-bit codes.

    Rounding is half-to-even. A constant group degenerates to scale 0 with
    all codes 0 (the formula would otherwise divide by zero).
    """
    if bits not in SUPPORTED_BITS:
        raise ContractViolation(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ContractViolation("quantize_group requires a nonempty group")
    if not np.all(np.isfinite(v)):
        raise ContractViolation("quantize_group requires finite values")
    z = float(v.min())
    m = float(v.max())
    levels = (1 << bits) - 1
    if m == z:
        return QuantGroup(np.zeros(v.size, dtype=np.uint8), z, 0.0, v.size)
    s = (m - z) / levels
    codes = np.clip(np.rint((v - z) / s), 0, levels).astype(np.uint8)
    return QuantGroup(codes, z, s, v.size)


def dequantize_group(g: QuantGroup) -> np.ndarray:
    """Invert :func:`quantize_group`: ``code * scale + zero_point`` (float64)."""
    if g.scale == 0.0:
        return np.full(g.length, g.zero_point, dtype=np.float64)
    return g.codes.astype(np.float64) * g.scale + g.zero_point


def _runs(m: np.ndarray, layout: Layout) -> np.ndarray:
    """View the matrix so each row of the result is one grouping run."""
    return m if layout == Layout.PER_TOKEN else m.T


def _quantize_runs_dense(runs: np.ndarray, cfg: QuantConfig):
    """Vectorized group stats for runs with no outliers removed.

    Returns (groups in run order, packed byte chunks in the same order).
    Full-size chunks across all runs are quantized in one shot; a trailing
    partial chunk per run becomes its own shorter group.
    """
    n_runs, run_len = runs.shape
    g = cfg.group_size
    levels = (1 << cfg.bits) - 1
    n_full = run_len // g
    rem = run_len % g

    full_codes = full_z = full_s = None
    if n_full:
        block = runs[:, : n_full * g].reshape(n_runs, n_full, g)
        z = block.min(axis=2)
        mx = block.max(axis=2)
        s = (mx - z) / levels
        codes = np.zeros(block.shape, dtype=np.uint8)
        nz = s > 0
        if nz.any():
            scaled = (block - z[:, :, None]) / np.where(nz, s, 1.0)[:, :, None]
            codes = np.where(
                nz[:, :, None],
                np.clip(np.rint(scaled), 0, levels),
                0,
            ).astype(np.uint8)
        full_codes, full_z, full_s = codes, z, s

    tail_groups = []
    if rem:
        tail = runs[:, n_full * g :]
        for r in range(n_runs):
            tail_groups.append(quantize_group(tail[r], cfg.bits))

    groups: list[QuantGroup] = []
    chunks: list[bytes] = []
    if n_full:
        packed_full = _pack_rows(full_codes.reshape(n_runs * n_full, g), cfg.bits)
    if rem:
        packed_tail = _pack_rows(
            np.stack([tg.codes for tg in tail_groups]), cfg.bits
        )
    for r in range(n_runs):
        for f in range(n_full):
            groups.append(
                QuantGroup(
                    full_codes[r, f].copy(),
                    float(full_z[r, f]),
                    float(full_s[r, f]),
                    g,
                )
            )
            chunks.append(packed_full[r * n_full + f].tobytes())
        if rem:
            groups.append(tail_groups[r])
            chunks.append(packed_tail[r].tobytes())
    return groups, chunks


def quantize_matrix(m: Matrix, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a full matrix under ``cfg``.

    Elements with ``|v| > outlier_threshold`` (when set) move to the sidecar
    first and are excluded from grouping; the survivors in each run compact
    leftward and are chopped into ``group_size`` chunks, the final partial
    chunk quantized as its own shorter group.
    """
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2 or m.size == 0:
        raise ContractViolation("quantize_matrix requires a nonempty 2-D matrix")
    rows, cols = m.shape
    work = m.astype(np.float64)

    outliers: list[tuple[int, int, float]] = []
    if cfg.outlier_threshold is not None:
        mask = np.abs(m) > cfg.outlier_threshold
        for r, c in zip(*np.nonzero(mask)):
            outliers.append((int(r), int(c), float(m[r, c])))
    else:
        mask = None

    if not outliers:
        groups, chunks = _quantize_runs_dense(_runs(work, cfg.layout), cfg)
    else:
        keep = _runs(~mask, cfg.layout)
        runs = _runs(work, cfg.layout)
        groups = []
        chunks = []
        for r in range(runs.shape[0]):
            vals = runs[r][keep[r]]
            for start in range(0, vals.size, cfg.group_size):
                grp = quantize_group(vals[start : start + cfg.group_size], cfg.bits)
                groups.append(grp)
                chunks.append(pack_codes(grp.codes, cfg.bits))

    return QuantizedTensor(
        shape=(rows, cols),
        bits=cfg.bits,
        group_size=cfg.group_size,
        layout=cfg.layout,
        groups=tuple(groups),
        packed_codes=b"".join(chunks),
        outliers=tuple(outliers),
    )


def _scatter_runs(values: np.ndarray, q: QuantizedTensor) -> np.ndarray:
    """Place a flat run-ordered value vector back into matrix positions.

    Outlier positions are skipped (left at zero) exactly as quantization
    skipped them when forming groups.
    """
    rows, cols = q.shape
    out = np.zeros((rows, cols), dtype=np.float64)
    keep = np.ones((rows, cols), dtype=bool)
    for r, c, _ in q.outliers:
        keep[r, c] = False
    kr = _runs(keep, q.layout)
    target = _runs(out, q.layout)
    pos = 0
    for r in range(target.shape[0]):
        idx = np.nonzero(kr[r])[0]
        target[r, idx] = values[pos : pos + idx.size]
        pos += idx.size
    return out


def dequantize_matrix(q: QuantizedTensor) -> Matrix:
    """Decode a QuantizedTensor back to a float32 matrix.

    Groups are decoded from the packed byte stream in order; outliers are
    written back bit-exactly at their original positions. Raises
    IntegrityError if the packed stream length does not match the groups.
    """
    expected = sum(group_byte_length(g.length, q.bits) for g in q.groups)
    if len(q.packed_codes) != expected:
        raise IntegrityError(
            f"packed stream is {len(q.packed_codes)} bytes, expected {expected}"
        )

    values = np.empty(sum(g.length for g in q.groups), dtype=np.float64)
    offset = 0
    pos = 0
    for g in q.groups:
        nbytes = group_byte_length(g.length, q.bits)
        codes = unpack_codes(q.packed_codes[offset : offset + nbytes], q.bits, g.length)
        if (codes != g.codes).any():
            raise IntegrityError("packed codes disagree with group codes")
        if g.scale == 0.0:
            values[pos : pos + g.length] = g.zero_point
        else:
            values[pos : pos + g.length] = codes.astype(np.float64) * g.scale + g.zero_point
        offset += nbytes
        pos += g.length

    result = _scatter_runs(values, q).astype(np.float32)
    for r, c, v in q.outliers:
        result[r, c] = np.float32(v)
    return result


def error_bound_matrix(q: QuantizedTensor) -> np.ndarray:
    """Per-element worst-case |dequantization error|, scale/2 for each group.

    Outlier positions are exact and get bound 0. Returned as float64 with
    the tensor's shape.
    """
    bounds = np.empty(sum(g.length for g in q.groups), dtype=np.float64)
    pos = 0
    for g in q.groups:
        bounds[pos : pos + g.length] = g.scale / 2.0
        pos += g.length
    return _scatter_runs(bounds, q)


def quantized_bytes(q: QuantizedTensor) -> int:
    """Accounted storage cost of a quantized tensor in bytes.

    Packed code bytes (byte-aligned per group) + 2 bytes of scale/zero
    metadata per group + 6 bytes per outlier.
    """
    return (
        len(q.packed_codes)
        + GROUP_METADATA_BYTES * len(q.groups)
        + OUTLIER_BYTES * len(q.outliers)
    )


def payload_bytes(q: QuantizedTensor) -> int:
    """Code and outlier-value bytes only, i.e. the cost with metadata waived."""
    return len(q.packed_codes) + 2 * len(q.outliers)


def quantized_bytes_for_shape(rows: int, cols: int, cfg: QuantConfig) -> int:
    """Byte cost of quantizing a (rows, cols) matrix with no outliers.

    Matches ``quantized_bytes(quantize_matrix(m, cfg))`` for any matrix of
    that shape whose elements all stay under the outlier threshold.
    """
    n_runs, run_len = (rows, cols) if cfg.layout == Layout.PER_TOKEN else (cols, rows)
    n_full, rem = divmod(run_len, cfg.group_size)
    per_run_codes = n_full * group_byte_length(cfg.group_size, cfg.bits)
    per_run_groups = n_full
    if rem:
        per_run_codes += group_byte_length(rem, cfg.bits)
        per_run_groups += 1
    return n_runs * (per_run_codes + GROUP_METADATA_BYTES * per_run_groups)
