"""Pruning primitives: magnitude/random prune of weights or neurons, tile-based
prune^pack (reduction criteria and the non-zero threshold), and expand.

Every function edits the network's masks in place, zeroes the pruned weights
and returns the list of masks. Counts are exact: pruning a fraction ``f`` of a
pool of ``n`` currently-active elements removes ``floor(f * n)`` of them, and
ties are broken in (layer, row, col) order.
"""

import math
import os
import sys
from dataclasses import dataclass
from enum import Enum

import numpy as np

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.tiling.tile_tensor import (
    tile_active_counts,
    tile_flags_to_cells,
    tile_reduce,
)
from src.utils.utils import make_rng

PRUNE_STREAM = 2


class PruneStructureError(ValueError):
    """Raised when a prune would remove every neuron of a layer."""


class Scope(Enum):
    LOCAL = "Lc"
    GLOBAL = "Gl"


class Criterion(Enum):
    L1 = "L1"
    RANDOM = "Rnd"
    TILE_AVG = "T-Avg"
    TILE_MAX = "T-Max"
    TILE_MIN = "T-Min"
    TILE_NONZERO_THRESHOLD = "T-Nnz"


class Target(Enum):
    WEIGHT = "Wei"
    NEURON = "Neu"
    TILE = "-"


TILE_REDUCTIONS = {
    Criterion.TILE_AVG: "avg",
    Criterion.TILE_MAX: "max",
    Criterion.TILE_MIN: "min",
}


@dataclass(frozen=True)
class PruneConfig:
    """Scope, criterion and target of a prune plus how much to remove.

    Written in the "{scope}/{criterion}/{target}" notation, e.g. "Lc/L1/Wei",
    "-/Rnd/Neu" or "Gl/T-Avg/-".
    """

    scope: Scope
    criterion: Criterion
    target: Target
    fraction: float = 0.0
    threshold_n: int = None

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"Expected fraction in [0, 1], got {self.fraction}")
        tile_criterion = self.criterion in TILE_REDUCTIONS or self.criterion is Criterion.TILE_NONZERO_THRESHOLD
        if tile_criterion != (self.target is Target.TILE):
            raise ValueError(f"{self}: tile criteria go with the tile target '-' and only with it")
        if self.criterion is Criterion.TILE_NONZERO_THRESHOLD and self.threshold_n is None:
            raise ValueError(f"{self}: the non-zero threshold criterion needs threshold_n")
        if self.threshold_n is not None and self.threshold_n < 0:
            raise ValueError(f"Expected threshold_n >= 0, got {self.threshold_n}")
        if (self.scope, self.criterion, self.target) == (Scope.GLOBAL, Criterion.L1, Target.NEURON):
            raise ValueError("Gl/L1/Neu is not supported: global scope applies to unstructured pruning only")

    @classmethod
    def parse(cls, text, fraction=0.0, threshold_n=None):
        """Builds a config from "{scope}/{criterion}/{target}"; a scope of "-" means local."""
        parts = str(text).strip().split("/")
        if len(parts) != 3:
            raise ValueError(f"Prune string {text!r} is not of the form scope/criterion/target")
        scope_text, criterion_text, target_text = parts
        try:
            scope = Scope.LOCAL if scope_text == "-" else Scope(scope_text)
            criterion = Criterion(criterion_text)
            target = Target(target_text)
        except ValueError:
            raise ValueError(f"Prune string {text!r} has an unknown scope, criterion or target") from None
        return cls(scope, criterion, target, fraction, threshold_n)

    def __str__(self):
        scope = "-" if self.criterion is Criterion.RANDOM else self.scope.value
        return f"{scope}/{self.criterion.value}/{self.target.value}"


def _prune_count(fraction, pool_size):
    # tolerance keeps e.g. 0.29 * 100 at 29
    return min(pool_size, int(math.floor(fraction * pool_size + 1e-9)))


def _check_fraction(fraction):
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"Expected fraction in [0, 1], got {fraction}")


def _finish(net):
    net.apply_masks()
    return [layer.mask for layer in net.layers]


def _prune_weights(net, cfg, rng):
    pools = [[k] for k in range(len(net.layers))] if cfg.scope is Scope.LOCAL else [list(range(len(net.layers)))]
    for pool in pools:
        layer_ids, flat_ids, mags = [], [], []
        for k in pool:
            layer = net.layers[k]
            active = np.flatnonzero(layer.mask)
            layer_ids.append(np.full(active.size, k))
            flat_ids.append(active)
            mags.append(np.abs(layer.weights.ravel()[active]))
        layer_ids, flat_ids, mags = (np.concatenate(a) for a in (layer_ids, flat_ids, mags))

        n_prune = _prune_count(cfg.fraction, flat_ids.size)
        if n_prune == 0:
            continue
        if cfg.criterion is Criterion.L1:
            victims = np.lexsort((flat_ids, layer_ids, mags))[:n_prune]
        else:
            victims = rng.choice(flat_ids.size, size=n_prune, replace=False)
        for k in pool:
            chosen = flat_ids[victims[layer_ids[victims] == k]]
            layer = net.layers[k]
            layer.mask[np.unravel_index(chosen, layer.mask.shape)] = False


def _prune_neurons(net, cfg, rng):
    # hidden neurons only: rows of layer k are the columns of layer k + 1
    for k in range(len(net.layers) - 1):
        incoming, outgoing = net.layers[k], net.layers[k + 1]
        active = np.flatnonzero(incoming.mask.any(axis=1) | outgoing.mask.any(axis=0))
        n_prune = _prune_count(cfg.fraction, active.size)
        if n_prune == 0:
            continue
        if n_prune >= active.size:
            raise PruneStructureError(
                f"Pruning {cfg.fraction:.0%} of the {active.size} neurons between layers {k} and {k + 1} removes all of them"
            )
        if cfg.criterion is Criterion.L1:
            scores = np.abs(incoming.weights[active]).sum(axis=1)
            victims = active[np.lexsort((active, scores))[:n_prune]]
        else:
            victims = active[rng.choice(active.size, size=n_prune, replace=False)]
        incoming.mask[victims, :] = False
        outgoing.mask[:, victims] = False


def prune(net, cfg, seed=0):
    """Prunes weights or hidden neurons by magnitude or at random.

    Parameters
    ----------
    net : Network
        Masks are updated in place
    cfg : PruneConfig
        Target must be weights or neurons; use ``prune_pack`` for tiles
    seed : int, optional
        Seeds the random criterion, by default 0

    Returns
    -------
    list of numpy.ndarray
        The updated masks

    Raises
    ------
    PruneStructureError
        A neuron prune would remove every neuron of a hidden layer.

    Example
    -------
    prune(net, PruneConfig.parse("Lc/L1/Wei", fraction=0.9))
    """
    if cfg.target is Target.TILE:
        raise ValueError(f"{cfg}: tile targets are pruned with prune_pack or prune_pack_threshold")
    rng = make_rng(seed, PRUNE_STREAM)
    if cfg.target is Target.WEIGHT:
        _prune_weights(net, cfg, rng)
    else:
        _prune_neurons(net, cfg, rng)
    return _finish(net)


def _reduction_name(reduction):
    if isinstance(reduction, Criterion):
        if reduction not in TILE_REDUCTIONS:
            raise ValueError(f"{reduction.value} is not a tile reduction criterion")
        return TILE_REDUCTIONS[reduction]
    if reduction in ("avg", "max", "min"):
        return reduction
    raise ValueError(f"Unknown tile reduction {reduction!r}")


def prune_pack(net, tile, reduction, scope, fraction):
    """Prunes whole tiles with the lowest average/maximum/minimum |w|.

    Each weight matrix is split into t1 x t2 tiles (virtually zero-padded at
    the edges); a tile's score is the reduction over the |w| of its real cells.
    The lowest-scoring ``fraction`` of the tiles that still hold an active cell
    is masked, ranked per layer (local) or across all layers (global).
    """
    _check_fraction(fraction)
    name = _reduction_name(reduction)
    scope = Scope(scope) if not isinstance(scope, Scope) else scope

    per_layer = []
    for k, layer in enumerate(net.layers):
        scores = tile_reduce(np.abs(layer.weights), tile, name)
        rows, cols = np.nonzero(tile_active_counts(layer.mask, tile) > 0)
        per_layer.append((np.full(rows.size, k), rows, cols, scores[rows, cols]))

    pools = [[k] for k in range(len(net.layers))] if scope is Scope.LOCAL else [list(range(len(net.layers)))]
    for pool in pools:
        layer_ids, rows, cols, scores = (np.concatenate([per_layer[k][i] for k in pool]) for i in range(4))
        n_prune = _prune_count(fraction, scores.size)
        if n_prune == 0:
            continue
        victims = np.lexsort((cols, rows, layer_ids, scores))[:n_prune]
        for k in pool:
            chosen = victims[layer_ids[victims] == k]
            layer = net.layers[k]
            flags = np.zeros(tile_active_counts(layer.mask, tile).shape, dtype=bool)
            flags[rows[chosen], cols[chosen]] = True
            layer.mask &= ~tile_flags_to_cells(flags, layer.mask.shape, tile)
    return _finish(net)


def prune_pack_threshold(net, tile, n):
    """Masks every tile holding ``n`` or fewer active cells; denser tiles are untouched."""
    if n < 0:
        raise ValueError(f"Expected a non-negative threshold, got N={n}")
    for layer in net.layers:
        sparse_tiles = tile_active_counts(layer.mask, tile) <= n
        layer.mask &= ~tile_flags_to_cells(sparse_tiles, layer.mask.shape, tile)
    return _finish(net)


def expand(net, tile):
    """Un-prunes every cell of each tile that still holds an active cell.

    Fully-zero tiles stay zero; padding cells are never activated. The newly
    active weights start at 0 and are learned during retraining.
    """
    for layer in net.layers:
        live_tiles = tile_active_counts(layer.mask, tile) > 0
        layer.mask = tile_flags_to_cells(live_tiles, layer.mask.shape, tile).copy()
    return _finish(net)
