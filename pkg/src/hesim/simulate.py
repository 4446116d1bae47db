"""Mock-HE inference over tile-tensor packed networks.

Plaintext numpy arrays stand in for ciphertexts; every homomorphic operation
goes through the counted helpers of ``tile_tensor`` so the report carries
Add/Mul/Rot/Relin counts alongside the decoded output.

Layer orientation alternates so no transpose is ever needed: even layers
reduce along tile axis 1 and write their outputs along axis 0, odd layers do
the opposite. A layer's output tiles are therefore already laid out as the
next layer's input tiles. The batch always lives on tile axis 2.
"""

import os
import sys
from dataclasses import dataclass, field

import numpy as np

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.hesim.op_counts import OpCounts
from src.nn.autoencoder import forward
from src.tiling.tile_tensor import (
    ZERO_FLAG,
    TiledTensor,
    decode,
    pack,
    relinearize,
    rotate_and_sum,
    tile_active_counts,
    tile_add,
    tile_mul,
)

# two 8-byte doubles per complex CKKS slot
BYTES_PER_SLOT = 16


class EquivalenceError(AssertionError):
    """Raised when the simulated output drifts from the plaintext forward pass."""


@dataclass
class MemoryEstimate:
    allocated_tiles: list
    total_tiles: list
    bytes_per_slot: int
    bytes: int

    @property
    def allocated(self):
        return sum(self.allocated_tiles)

    @property
    def total(self):
        return sum(self.total_tiles)


@dataclass
class SimReport:
    """Counts, memory and decoded output of one simulated inference."""

    tile: object
    counts: OpCounts
    allocated_tiles: list
    total_tiles: list
    memory_bytes: int
    bytes_per_slot: int
    output: np.ndarray
    deviation: float
    layer_outputs: list = field(default_factory=list, repr=False)

    @property
    def latency_ms(self):
        return self.counts.latency_proxy()

    def as_dict(self):
        return {
            "tile": str(self.tile),
            **self.counts.as_dict(),
            "allocated_tiles": int(sum(self.allocated_tiles)),
            "total_tiles": int(sum(self.total_tiles)),
            "memory_bytes": int(self.memory_bytes),
            "latency_ms": float(self.latency_ms),
            "deviation": float(self.deviation),
        }


def _orientation(k):
    """(reduce_axis, out_axis) of layer ``k``."""
    return (1, 0) if k % 2 == 0 else (0, 1)


def _check_tile(tile):
    if tile.t1 != tile.t2:
        raise ValueError(
            f"Simulated inference needs square tiles (t1 == t2) so layers can alternate orientation, got {tile.t1}x{tile.t2}"
        )
    if tile.t1 & (tile.t1 - 1):
        raise ValueError(f"Tile width must be a power of two for rotate-and-sum, got {tile.t1}")


def _bias_tiles(bias, tile, out_axis):
    extent = tile.dims[out_axis]
    n_blocks = -(-bias.size // extent)
    padded = np.zeros(n_blocks * extent)
    padded[: bias.size] = bias
    shape = [1, 1, 1]
    shape[out_axis] = extent
    tiles = []
    for i in range(n_blocks):
        block = padded[i * extent:(i + 1) * extent]
        tiles.append(ZERO_FLAG if not block.any() else np.broadcast_to(block.reshape(shape), tile.dims))
    return tiles


def _simulate_layer(layer, x, tile, k, squares, counter):
    reduce_axis, out_axis = _orientation(k)
    weights = pack(layer.weights, tile, axes=(out_axis, reduce_axis))
    bias = _bias_tiles(layer.bias, tile, out_axis)
    extent = tile.dims[reduce_axis]
    batch_blocks, in_blocks = x.grid
    out_blocks = weights.grid[0]

    out_tiles = []
    for b in range(batch_blocks):
        row = []
        for i in range(out_blocks):
            acc = ZERO_FLAG
            # fixed accumulation order over input blocks
            for j in range(in_blocks):
                acc = tile_add(acc, tile_mul(weights.tiles[i][j], x.tiles[b][j], counter), counter)
            acc = relinearize(acc, counter)
            acc = rotate_and_sum(acc, extent, counter, axis=reduce_axis)
            acc = tile_add(acc, bias[i], counter)
            if squares:
                acc = relinearize(tile_mul(acc, acc, counter), counter)
            row.append(acc)
        out_tiles.append(row)
    shape = (x.shape[0], layer.out_dim)
    return weights.allocated, weights.total, TiledTensor(shape, tile, (2, out_axis), out_tiles)


def simulate_inference(net, batch, tile, bytes_per_slot=BYTES_PER_SLOT):
    """Runs a batch through the packed network and counts every HE operation.

    Per layer and output tile: multiply each weight tile with the matching
    input tile and accumulate, relinearize once, rotate-and-sum along the
    reduction axis, add the bias tile and square (one mul and one relin).
    Zero-flag tiles are skipped by the arithmetic helpers, so zero weight
    tiles cost neither memory nor operations.

    Parameters
    ----------
    net : Network
        Masks already applied
    batch : numpy.ndarray
        B x in_dim plaintext inputs; B beyond t3 spans several batch tiles
    tile : TileShape
        Square tile, power-of-two width
    bytes_per_slot : int, optional
        Memory cost of one slot, by default 16

    Returns
    -------
    SimReport
    """
    _check_tile(tile)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != net.in_dim:
        raise ValueError(f"Expected a batch of shape (B, {net.in_dim}), got {batch.shape}")

    counter = OpCounts()
    x = pack(batch, tile, axes=(2, _orientation(0)[0]))
    allocated, total, layer_outputs = [], [], []
    for k, layer in enumerate(net.layers):
        n_alloc, n_total, x = _simulate_layer(layer, x, tile, k, net.squares(k), counter)
        allocated.append(n_alloc)
        total.append(n_total)
        layer_outputs.append(decode(x))

    output = layer_outputs[-1]
    reference, _ = forward(net, batch)
    deviation = float(np.max(np.abs(output - reference))) if output.size else 0.0
    return SimReport(
        tile=tile,
        counts=counter,
        allocated_tiles=allocated,
        total_tiles=total,
        memory_bytes=sum(allocated) * tile.slots * bytes_per_slot,
        bytes_per_slot=bytes_per_slot,
        output=output,
        deviation=deviation,
        layer_outputs=layer_outputs,
    )


def memory_estimate(net, tile, bytes_per_slot=BYTES_PER_SLOT):
    """Weight-tile memory: allocated (non-zero) tiles x slots x bytes per slot."""
    allocated, total = [], []
    for layer in net.layers:
        live = tile_active_counts(layer.weights != 0.0, tile) > 0
        allocated.append(int(live.sum()))
        total.append(int(live.size))
    return MemoryEstimate(allocated, total, bytes_per_slot, sum(allocated) * tile.slots * bytes_per_slot)


def verify_equivalence(net, dataset, tile, tolerance=1e-9, batch_size=None):
    """Checks simulated and plaintext inference agree on every sample.

    Returns the largest absolute deviation. Raises EquivalenceError naming the
    first layer and the (batch tile, feature tile) index where the deviation
    exceeds ``tolerance``.
    """
    samples = dataset.samples if hasattr(dataset, "samples") else np.asarray(dataset, dtype=np.float64)
    batch_size = batch_size or tile.t3
    worst = 0.0
    for start in range(0, samples.shape[0], batch_size):
        x = samples[start:start + batch_size]
        report = simulate_inference(net, x, tile)
        _, cache = forward(net, x)
        plaintext = cache.inputs[1:] + [cache.output]
        for k, (simulated, expected) in enumerate(zip(report.layer_outputs, plaintext)):
            diff = np.abs(simulated - expected)
            if diff.size == 0:
                continue
            worst = max(worst, float(diff.max()))
            if diff.max() > tolerance:
                row, col = np.unravel_index(np.argmax(diff), diff.shape)
                out_axis = _orientation(k)[1]
                tile_index = ((start + row) // tile.t3, col // tile.dims[out_axis])
                raise EquivalenceError(
                    f"Layer {k}, output tile {tile_index}: simulated value deviates by {diff.max():.3e} "
                    f"(tolerance {tolerance:.1e})"
                )
    return worst
