"""Zero-tile maximising permutations.

Neurons are regrouped one boundary at a time, and a boundary's neurons are
the rows of the incoming matrix and the columns of the outgoing one, so both
matrices are permuted in tandem. Three groupings of exactly one tile's worth
of neurons are tried per boundary: a balanced k-means over the binarised
mask rows and columns, a greedy grouping over the tiles each neuron touches
(given how the far side of each matrix is grouped at that moment), and a
balanced k-means over those tile patterns started from the greedy grouping.
The grouping leaving the most zero tiles is kept, and only if it loses none.
Reordering never changes what the network computes; the boundary
permutations P_in / P_out are applied by the client to plaintext inputs and
outputs.

A permutation vector ``p`` is a gather: new index ``j`` holds old index ``p[j]``.
"""

import math
import os
import sys
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from sklearn.metrics import pairwise_distances

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.nn.autoencoder import FCLayer, Network
from src.tiling.tile_tensor import TileShape, tile_active_counts
from src.utils.utils import make_rng

PERMUTE_STREAM = 3
DEFAULT_MAX_ITERS = 32
KMEANS_ITERS = 32
ORACLE_MAX_DIM = 8


class OracleSizeError(ValueError):
    """Raised when the exhaustive oracle is asked for a matrix larger than it can enumerate."""


@dataclass
class LayerPermutations:
    """One permutation vector per neuron boundary, input features first, output features last."""

    vectors: list

    def __post_init__(self):
        self.vectors = [np.asarray(v, dtype=np.int64) for v in self.vectors]
        for b, v in enumerate(self.vectors):
            if not np.array_equal(np.sort(v), np.arange(v.size)):
                raise ValueError(f"Boundary {b} vector is not a permutation of 0..{v.size - 1}")

    @classmethod
    def identity(cls, net):
        return cls([np.arange(d) for d in net.dims])

    @property
    def p_in(self):
        return self.vectors[0]

    @property
    def p_out(self):
        return self.vectors[-1]

    def inverse(self):
        return LayerPermutations([np.argsort(v) for v in self.vectors])

    def is_identity(self):
        return all(np.array_equal(v, np.arange(v.size)) for v in self.vectors)

    def permute_input(self, batch):
        """Client side, before encryption: reorder input features with P_in."""
        return np.asarray(batch)[:, self.p_in]

    def restore_output(self, output):
        """Client side, after decryption: undo the output reordering of P_out."""
        return np.asarray(output)[:, np.argsort(self.p_out)]


def count_zero_tiles(mask, tile):
    """Zero tiles and total tiles of a mask over the zero-padded tile grid.

    Returns
    -------
    tuple of int
        (zero, total), total = ceil(M/t1) * ceil(N/t2)
    """
    counts = tile_active_counts(mask, tile)
    return int(np.count_nonzero(counts == 0)), int(counts.size)


def network_zero_tiles(masks, tile):
    """Zero and total tile counts summed over a list of masks."""
    zero = total = 0
    for mask in masks:
        z, t = count_zero_tiles(mask, tile)
        zero += z
        total += t
    return zero, total


def _tie_break_priority(points, seed):
    # identical and similar rows get neighbouring priorities so equal distances
    # pull them into the same cluster; the seed orders identical rows
    keys = [make_rng(seed, PERMUTE_STREAM).permutation(points.shape[0])]
    keys.extend(points[:, j] for j in reversed(range(points.shape[1])))
    priority = np.empty(points.shape[0], dtype=np.int64)
    priority[np.lexsort(keys)] = np.arange(points.shape[0])
    return priority


def _greedy_assign(distances, capacity, priority):
    n, k = distances.shape
    point_ids = np.repeat(np.arange(n), k)
    cluster_ids = np.tile(np.arange(k), n)
    order = np.lexsort((cluster_ids, priority[point_ids], distances.ravel()))

    labels = np.full(n, -1, dtype=np.int64)
    remaining = capacity.copy()
    assigned = 0
    for p, c in zip(point_ids[order].tolist(), cluster_ids[order].tolist()):
        if labels[p] >= 0 or remaining[c] == 0:
            continue
        labels[p] = c
        remaining[c] -= 1
        assigned += 1
        if assigned == n:
            break
    return labels


def _centroid(members):
    mean = members.mean(axis=0)
    thresholded = (mean >= 0.5).astype(np.float64)
    # sparse clusters threshold to all-zero
    return thresholded if thresholded.any() else mean


def balanced_kmeans(points, cluster_size, seed=0, max_iters=KMEANS_ITERS, init_labels=None):
    """Clusters binary vectors into groups of exactly ``cluster_size``.

    Clusters start from ``init_labels`` or, by default, from the current
    grouping (points 0..t-1 form cluster 0, and so on). Each step assigns
    (point, centroid) pairs greedily in order of L1 distance (the Hamming
    distance while centroids are binary) while respecting the starting
    cluster sizes, then recomputes every centroid as its members'
    per-coordinate mean thresholded at 0.5 (the plain mean when that
    threshold leaves nothing). When the count is not a multiple of
    ``cluster_size`` the last cluster is short; it is the one sitting
    against the tile padding.

    Returns
    -------
    numpy.ndarray
        Cluster label per point
    """
    points = np.asarray(points, dtype=bool)
    n = points.shape[0]
    k = math.ceil(n / cluster_size)
    if init_labels is None:
        labels = np.arange(n) // cluster_size
    else:
        labels = np.asarray(init_labels, dtype=np.int64)
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= k:
            raise ValueError(f"Initial labels must give each of the {n} points a cluster in 0..{k - 1}")
    if k <= 1 or points.shape[1] == 0:
        return labels
    capacity = np.bincount(labels, minlength=k)
    priority = _tie_break_priority(points, seed)
    values = points.astype(np.float64)

    for _ in range(max_iters):
        centroids = np.vstack([_centroid(values[labels == c]) for c in range(k)])
        distances = pairwise_distances(values, centroids, metric="cityblock")
        new_labels = _greedy_assign(distances, capacity, priority)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels


def _greedy_grouping(patterns, raw, cluster_size):
    """Grows one group at a time around the widest remaining pattern.

    A group takes the point that adds the fewest new bits to its pattern
    union, then the fewest to its raw union, then the lowest index. The
    last group is the short one.
    """
    n = patterns.shape[0]
    labels = np.full(n, -1, dtype=np.int64)
    group = 0
    for start in np.argsort(-patterns.sum(axis=1), kind="stable").tolist():
        if labels[start] >= 0:
            continue
        labels[start] = group
        union, raw_union = patterns[start].copy(), raw[start].copy()
        for _ in range(cluster_size - 1):
            free = np.flatnonzero(labels < 0)
            if free.size == 0:
                break
            growth = (patterns[free] & ~union).sum(axis=1)
            raw_growth = (raw[free] & ~raw_union).sum(axis=1)
            pick = free[np.lexsort((free, raw_growth, growth))[0]]
            labels[pick] = group
            union |= patterns[pick]
            raw_union |= raw[pick]
        group += 1
    return labels


def _permuted_masks(masks, perms):
    return [mask[np.ix_(perms[k + 1], perms[k])] for k, mask in enumerate(masks)]


def _boundary_points(masks, b):
    # neurons at boundary b are rows of masks[b - 1] and columns of masks[b]
    parts = []
    if b >= 1:
        parts.append(masks[b - 1])
    if b < len(masks):
        parts.append(masks[b].T)
    return np.hstack(parts).astype(bool)


def _tile_patterns(masks, b, tile):
    # the tiles each neuron touches given how the far side is grouped now
    parts = []
    if b >= 1:
        parts.append(tile_active_counts(masks[b - 1], TileShape(1, tile.t2)) > 0)
    if b < len(masks):
        parts.append((tile_active_counts(masks[b], TileShape(tile.t1, 1)) > 0).T)
    return np.hstack(parts)


def _search(masks, dims, tile, seed, max_iters):
    """Boundary-by-boundary search shared by the single-matrix and network cases."""
    n_layers = len(masks)
    perms = [np.arange(d) for d in dims]
    best, _ = network_zero_tiles(masks, tile)
    # odd boundaries share no matrix with each other, neither do even ones
    order = [b for b in range(n_layers + 1) if b % 2 == 1] + [b for b in range(n_layers + 1) if b % 2 == 0]

    for _ in range(max_iters):
        sweep_start = best
        for b in order:
            current = _permuted_masks(masks, perms)
            size = tile.t1 if b >= 1 else tile.t2
            raw = _boundary_points(current, b)
            patterns = _tile_patterns(current, b, tile)
            grouped = _greedy_grouping(patterns, raw, size)
            candidates = (
                balanced_kmeans(raw, size, seed),
                grouped,
                balanced_kmeans(patterns, size, seed, init_labels=grouped),
            )

            # earlier candidates win ties
            chosen, chosen_score = None, -1
            for labels in candidates:
                trial = list(perms)
                trial[b] = perms[b][np.argsort(labels, kind="stable")]
                score, _ = network_zero_tiles(_permuted_masks(masks, trial), tile)
                if score > chosen_score:
                    chosen, chosen_score = trial, score
            if chosen_score >= best:
                perms, best = chosen, chosen_score
        if best <= sweep_start:
            break
    return perms


def permute_single(mask, tile, seed=0, max_iters=DEFAULT_MAX_ITERS):
    """Row and column permutations of one mask that maximise its zero tiles.

    Alternates a row clustering pass (clusters of t1 rows) and a column pass
    (clusters of t2 columns) until a full pass brings no new zero tile or
    ``max_iters`` passes ran. A pass result is kept only if it does not lose
    zero tiles, so the answer is never worse than the identity.

    Returns
    -------
    tuple of numpy.ndarray
        (row_perm, col_perm)
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        raise ValueError("Cannot permute an empty mask")
    perms = _search([mask], [mask.shape[1], mask.shape[0]], tile, seed, max_iters)
    return perms[1], perms[0]


def permute_network(net, tile, seed=0, max_iters=DEFAULT_MAX_ITERS):
    """Permutations for every neuron boundary of a pruned network.

    Odd boundaries are clustered first, then even ones, and sweeps repeat
    until one yields no zero-tile gain. The input and output boundaries each
    touch a single matrix; their vectors are P_in and P_out.

    Returns
    -------
    LayerPermutations
    """
    masks = [layer.mask.copy() for layer in net.layers]
    return LayerPermutations(_search(masks, net.dims, tile, seed, max_iters))


def apply_permutations(net, perms):
    """Reorders weights, masks and biases; the result computes the same function.

    ``forward(permuted, perms.permute_input(x))`` equals the original output
    reordered by P_out.
    """
    if len(perms.vectors) != len(net.dims) or any(
        v.size != d for v, d in zip(perms.vectors, net.dims)
    ):
        raise ValueError(
            f"Permutation sizes {[v.size for v in perms.vectors]} do not match network dims {net.dims}"
        )
    layers = []
    for k, layer in enumerate(net.layers):
        rows, cols = perms.vectors[k + 1], perms.vectors[k]
        layers.append(
            FCLayer(
                layer.weights[np.ix_(rows, cols)],
                layer.bias[rows],
                layer.mask[np.ix_(rows, cols)],
            )
        )
    return Network(layers, arch=net.arch, square_output=net.square_output, version=net.version + 1)


def _equal_partitions(items, size):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for others in combinations(rest, size - 1):
        remaining = tuple(i for i in rest if i not in others)
        for tail in _equal_partitions(remaining, size):
            yield [(first,) + others] + tail


def _balanced_partitions(n, size):
    # groups of ``size`` plus one short group when n is not a multiple of it
    items = tuple(range(n))
    short = n % size
    if short == 0:
        yield from _equal_partitions(items, size)
        return
    for group in combinations(items, short):
        rest = tuple(i for i in items if i not in group)
        for groups in _equal_partitions(rest, size):
            yield groups + [group]


def brute_force_permute(mask, tile):
    """Exact maximum number of zero tiles over all row and column permutations.

    Only the grouping of rows into tiles matters, not their order, so the
    oracle enumerates balanced set partitions of rows and of columns. Test
    oracle only: both sides must be at most 8.
    """
    mask = np.asarray(mask, dtype=bool)
    rows, cols = mask.shape
    if rows > ORACLE_MAX_DIM or cols > ORACLE_MAX_DIM:
        raise OracleSizeError(
            f"Exhaustive search is limited to {ORACLE_MAX_DIM}x{ORACLE_MAX_DIM}, got {rows}x{cols}"
        )

    column_groupings = []
    for partition in _balanced_partitions(cols, tile.t2):
        indicator = np.zeros((cols, len(partition)), dtype=np.int64)
        for c, group in enumerate(partition):
            indicator[list(group), c] = 1
        column_groupings.append(indicator)
    column_groupings = np.stack(column_groupings)

    best = 0
    for partition in _balanced_partitions(rows, tile.t1):
        # per row group: which columns hold an active cell
        touched = np.stack([mask[list(group)].any(axis=0) for group in partition]).astype(np.int64)
        live = (touched @ column_groupings) > 0
        best = max(best, int((~live).sum(axis=(1, 2)).max()))
    return best
