"""Tile-tensor packing with zero-flags.

A tile has shape [t1, t2, t3] and maps to one ciphertext of t1*t2*t3 slots,
laid out row-major (t1, then t2, then t3). A matrix is split into t1 x t2
blocks (zero-padded at the edges) and each block is replicated along the
remaining axis. Replication is a read-only numpy broadcast view, so a
replicated tile costs one tile of memory accounting and no extra storage.

A tile whose every slot is zero is never stored: it is represented by the
zero-flag ``None`` and the arithmetic helpers below skip work on it.
Rotations are cyclic along one tile axis.
"""

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_SLOTS = 16384
# tile widths evaluated for t1 = t2
EVALUATED_TILE_DIMS = (2, 4, 8, 16)

# a zero-flag tile
ZERO_FLAG = None


@dataclass(frozen=True)
class TileShape:
    """Tile geometry [t1, t2, t3]; t3 is the batch dimension."""

    t1: int
    t2: int
    t3: int = 1

    def __post_init__(self):
        for name in ("t1", "t2", "t3"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"Degenerate tile: {name}={value}, every tile dimension must be >= 1")

    @property
    def slots(self):
        return self.t1 * self.t2 * self.t3

    @property
    def dims(self):
        return (self.t1, self.t2, self.t3)

    @property
    def cells(self):
        """Cells of one t1 x t2 weight block."""
        return self.t1 * self.t2

    @classmethod
    def from_slots(cls, t1, t2, slots=DEFAULT_SLOTS):
        """Derives t3 so the tile fills exactly ``slots`` ciphertext slots."""
        if t1 < 1 or t2 < 1 or slots % (t1 * t2) != 0:
            raise ValueError(f"{t1}x{t2} tiles do not divide {slots} slots")
        return cls(t1, t2, slots // (t1 * t2))

    @classmethod
    def parse(cls, text, slots=DEFAULT_SLOTS, evaluated_only=False):
        """Parses "t1xt2" (t3 derived from ``slots``) or "t1xt2xt3".

        With ``evaluated_only``, t1 and t2 must be evaluated widths; this is
        checked before t3 is derived from the slot count.
        """
        parts = str(text).lower().split("x")
        try:
            dims = [int(p) for p in parts]
        except ValueError:
            raise ValueError(f"Tile shape {text!r} is not of the form t1xt2") from None
        if len(dims) not in (2, 3):
            raise ValueError(f"Tile shape {text!r} is not of the form t1xt2")
        if evaluated_only:
            _check_evaluated_dims(dims[0], dims[1])
        if len(dims) == 2:
            return cls.from_slots(dims[0], dims[1], slots)
        return cls(*dims)

    def require_evaluated_dims(self):
        """Checks t1 and t2 are one of the evaluated widths {2, 4, 8, 16}."""
        _check_evaluated_dims(self.t1, self.t2)
        return self

    def __str__(self):
        return f"{self.t1}x{self.t2}x{self.t3}"


def _check_evaluated_dims(t1, t2):
    if t1 not in EVALUATED_TILE_DIMS or t2 not in EVALUATED_TILE_DIMS:
        raise ValueError(f"Tile {t1}x{t2}: t1 and t2 must each be one of {list(EVALUATED_TILE_DIMS)}")


# ---------------------------------------------------------------------------
# block views over 2-d matrices (masks and weights)
# ---------------------------------------------------------------------------


def tile_grid(shape, tile):
    """Number of tiles along each axis of an M x N matrix."""
    rows, cols = shape
    return (math.ceil(rows / tile.t1), math.ceil(cols / tile.t2))


def tile_blocks(matrix, tile, fill=0):
    """Returns a (R, C, t1, t2) view of the matrix padded with ``fill``."""
    matrix = np.asarray(matrix)
    grid_r, grid_c = tile_grid(matrix.shape, tile)
    padded = np.full((grid_r * tile.t1, grid_c * tile.t2), fill, dtype=np.result_type(matrix, type(fill)))
    padded[: matrix.shape[0], : matrix.shape[1]] = matrix
    return padded.reshape(grid_r, tile.t1, grid_c, tile.t2).transpose(0, 2, 1, 3)


def tile_active_counts(mask, tile):
    """Active (mask == 1) cells per tile, shape (R, C)."""
    return tile_blocks(np.asarray(mask, dtype=np.int64), tile).sum(axis=(2, 3))


def tile_real_counts(shape, tile):
    """Non-padding cells per tile, shape (R, C)."""
    return tile_active_counts(np.ones(shape, dtype=np.int64), tile)


def tile_reduce(values, tile, reduction):
    """Per-tile "avg", "max" or "min" of ``values`` over real (non-padding) cells."""
    blocks = tile_blocks(np.asarray(values, dtype=np.float64), tile, fill=np.nan)
    reducers = {"avg": np.nanmean, "max": np.nanmax, "min": np.nanmin}
    if reduction not in reducers:
        raise ValueError(f"Unknown tile reduction {reduction!r}, expected one of {sorted(reducers)}")
    return reducers[reduction](blocks, axis=(2, 3))


def tile_flags_to_cells(flags, shape, tile):
    """Broadcasts a per-tile boolean grid back to a cell mask of ``shape``."""
    cells = np.repeat(np.repeat(np.asarray(flags, dtype=bool), tile.t1, axis=0), tile.t2, axis=1)
    return cells[: shape[0], : shape[1]]


def zero_histogram(mask, tile):
    """Counts of tiles by number of zero cells (padding counts as zero).

    Bin ``z`` holds the number of tiles with exactly ``z`` zeros; bins run from
    0 to t1*t2 and sum to the total tile count.
    """
    zeros = tile.cells - tile_active_counts(mask, tile)
    return np.bincount(zeros.ravel(), minlength=tile.cells + 1)


# ---------------------------------------------------------------------------
# packed tensors
# ---------------------------------------------------------------------------


@dataclass
class TiledTensor:
    """A 2-d logical tensor packed into tiles.

    ``axes`` maps logical axis 0 and 1 to tile axes (0 = t1, 1 = t2, 2 = t3);
    the third tile axis holds replicas. ``tiles[i][j]`` is the tile for block
    ``i`` of logical axis 0 and block ``j`` of logical axis 1, or ZERO_FLAG.
    """

    shape: tuple
    tile: TileShape
    axes: tuple
    tiles: list

    @property
    def grid(self):
        return (len(self.tiles), len(self.tiles[0]) if self.tiles else 0)

    @property
    def replicated_axis(self):
        return ({0, 1, 2} - set(self.axes)).pop()

    @property
    def allocated(self):
        return sum(t is not ZERO_FLAG for row in self.tiles for t in row)

    @property
    def total(self):
        grid_r, grid_c = self.grid
        return grid_r * grid_c


def _block_extents(tile, axes):
    dims = tile.dims
    return dims[axes[0]], dims[axes[1]]


def pack(matrix, tile, axes):
    """Packs a 2-d matrix with its axes mapped onto ``axes`` of the tile."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"Expected a 2-d matrix, got shape {matrix.shape}")
    if len(set(axes)) != 2 or not set(axes) <= {0, 1, 2}:
        raise ValueError(f"Axes {axes} must be two distinct tile axes out of 0, 1, 2")
    e0, e1 = _block_extents(tile, axes)
    grid_r, grid_c = math.ceil(matrix.shape[0] / e0), math.ceil(matrix.shape[1] / e1)
    padded = np.zeros((grid_r * e0, grid_c * e1))
    padded[: matrix.shape[0], : matrix.shape[1]] = matrix

    block_shape = [1, 1, 1]
    block_shape[axes[0]], block_shape[axes[1]] = e0, e1
    tiles = []
    for i in range(grid_r):
        row = []
        for j in range(grid_c):
            block = padded[i * e0:(i + 1) * e0, j * e1:(j + 1) * e1]
            if not block.any():
                row.append(ZERO_FLAG)
                continue
            oriented = block if axes[0] < axes[1] else block.T
            row.append(np.broadcast_to(oriented.reshape(block_shape), tile.dims))
        tiles.append(row)
    return TiledTensor(tuple(matrix.shape), tile, tuple(axes), tiles)


def decode(tensor):
    """Unpacks a TiledTensor back to its logical matrix, stripping padding.

    Replicated slots are read at index 0 of the replica axis.
    """
    e0, e1 = _block_extents(tensor.tile, tensor.axes)
    grid_r, grid_c = tensor.grid
    out = np.zeros((grid_r * e0, grid_c * e1))
    index = [slice(None)] * 3
    index[tensor.replicated_axis] = 0
    for i in range(grid_r):
        for j in range(grid_c):
            t = tensor.tiles[i][j]
            if t is ZERO_FLAG:
                continue
            block = np.asarray(t)[tuple(index)]
            if tensor.axes[0] > tensor.axes[1]:
                block = block.T
            out[i * e0:(i + 1) * e0, j * e1:(j + 1) * e1] = block
    return out[: tensor.shape[0], : tensor.shape[1]]


def pack_matrix(weights, tile):
    """Packs an M x N weight matrix into t1 x t2 blocks replicated t3 times.

    All-zero blocks become zero-flags and are not allocated.
    """
    return pack(weights, tile, axes=(0, 1))


def pack_batch(batch, tile):
    """Packs B samples x dim features: features along t2, samples along t3.

    B must fit a single tile along the batch axis (B <= t3) or fill whole
    tiles (B a multiple of t3).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError(f"Expected a 2-d batch, got shape {batch.shape}")
    n = batch.shape[0]
    if n > tile.t3 and n % tile.t3 != 0:
        raise ValueError(f"Batch of {n} samples is neither <= t3={tile.t3} nor a multiple of it")
    return pack(batch, tile, axes=(2, 1))


# ---------------------------------------------------------------------------
# counted tile arithmetic
# ---------------------------------------------------------------------------


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"Tile shapes differ: {a.shape} vs {b.shape}")


def tile_add(a, b, counter):
    """Adds two tiles; a zero-flag operand returns the other operand uncounted."""
    if a is ZERO_FLAG:
        return b
    if b is ZERO_FLAG:
        return a
    _check_same_shape(a, b)
    counter.add += 1
    return a + b


def tile_mul(a, b, counter):
    """Multiplies two tiles elementwise; any zero-flag operand gives a zero-flag uncounted."""
    if a is ZERO_FLAG or b is ZERO_FLAG:
        return ZERO_FLAG
    _check_same_shape(a, b)
    counter.mul += 1
    return a * b


def relinearize(t, counter):
    """Counts one relinearization of a data tile; values are unchanged."""
    if t is ZERO_FLAG:
        return ZERO_FLAG
    counter.relin += 1
    return t


def rotate_and_sum(t, axis_extent, counter, axis=1):
    """Sums a tile along one axis with log2(extent) rotate-and-add steps.

    After the reduction every slot along ``axis`` holds the full sum. Costs
    log2(extent) rotations and log2(extent) additions; a zero-flag costs
    nothing.
    """
    if axis_extent < 1 or axis_extent & (axis_extent - 1):
        raise ValueError(f"Rotate-and-sum extent must be a power of two, got {axis_extent}")
    if t is ZERO_FLAG:
        return ZERO_FLAG
    if np.shape(t)[axis] != axis_extent:
        raise ValueError(f"Tile axis {axis} has extent {np.shape(t)[axis]}, not {axis_extent}")
    stride = axis_extent // 2
    while stride >= 1:
        rotated = np.roll(t, -stride, axis=axis)
        counter.rot += 1
        counter.add += 1
        t = t + rotated
        stride //= 2
    return t
