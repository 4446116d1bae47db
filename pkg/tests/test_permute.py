import os
import sys

import numpy as np
import pytest

cur_dir = os.path.dirname(os.path.abspath(__file__))
src_path = os.path.dirname(cur_dir)
if src_path not in sys.path:
    sys.path.append(src_path)

from src.nn.autoencoder import FCLayer, Network, forward
from src.permute.permute import (
    LayerPermutations,
    OracleSizeError,
    apply_permutations,
    balanced_kmeans,
    brute_force_permute,
    count_zero_tiles,
    network_zero_tiles,
    permute_network,
    permute_single,
)
from src.tiling.tile_tensor import TileShape


def masked_network(masks, rng=None, dyadic=False):
    """Network with the given masks; dyadic values keep every sum exact."""
    rng = rng or np.random.default_rng(0)
    layers = []
    for mask in masks:
        mask = np.asarray(mask, dtype=bool)
        if dyadic:
            weights = rng.integers(-4, 5, size=mask.shape) / 8.0
            bias = rng.integers(-4, 5, size=mask.shape[0]) / 8.0
        else:
            weights = rng.normal(size=mask.shape)
            bias = rng.normal(size=mask.shape[0])
        layers.append(FCLayer(weights, bias, mask))
    return Network(layers)


def shuffled_block_diagonal(blocks, size, rng):
    n = blocks * size
    mask = np.zeros((n, n), dtype=bool)
    for b in range(blocks):
        mask[b * size:(b + 1) * size, b * size:(b + 1) * size] = True
    return mask[rng.permutation(n)][:, rng.permutation(n)]


# 6-4-8-4 network with 34 of 88 weights left, laid out for 2x2 tiles
GOOD_MASKS = [
    np.array([
        [1, 1, 1, 0, 0, 0],
        [0, 1, 1, 1, 0, 0],
        [0, 0, 1, 1, 1, 0],
        [0, 0, 0, 1, 1, 1],
    ]),
    np.array([
        [1, 1, 0, 0],
        [1, 0, 0, 0],
        [0, 0, 1, 1],
        [0, 0, 0, 1],
        [1, 1, 0, 0],
        [0, 1, 0, 0],
        [1, 0, 1, 0],
        [0, 1, 0, 1],
    ]),
    np.array([
        [1, 0, 1, 0, 0, 1, 0, 0],
        [0, 1, 0, 0, 1, 0, 0, 0],
        [0, 0, 0, 1, 0, 0, 1, 0],
        [0, 0, 0, 0, 1, 0, 0, 1],
    ]),
]
SHUFFLE = LayerPermutations([
    [0, 4, 1, 5, 2, 3],
    [0, 2, 1, 3],
    [0, 2, 4, 6, 1, 3, 5, 7],
    [0, 2, 1, 3],
])


"""ZERO TILE COUNT TESTS"""

@pytest.mark.parametrize(
    "mask, tile, expected",
    [
        (np.zeros((32, 784)), TileShape(2, 2), (6272, 6272)),
        (np.ones((4, 4)), TileShape(2, 2), (0, 4)),
        (np.ones((3, 3)), TileShape(2, 2), (0, 4)),
        (np.eye(4), TileShape(2, 2), (2, 4)),
        (np.zeros((5, 3)), TileShape(4, 2), (4, 4)),
    ],
)
def test_count_zero_tiles(mask, tile, expected):
    assert count_zero_tiles(mask, tile) == expected


"""CLUSTERING TESTS"""

def test_balanced_kmeans_sizes_are_exact():
    rng = np.random.default_rng(0)
    points = rng.random((11, 7)) < 0.4

    labels = balanced_kmeans(points, 4, seed=0)

    np.testing.assert_array_equal(np.bincount(labels), [4, 4, 3])


def test_balanced_kmeans_groups_identical_rows():
    patterns = np.array([[1, 1, 0, 0, 0, 0], [0, 0, 1, 1, 0, 0], [0, 0, 0, 0, 1, 1]], dtype=bool)
    points = patterns[[0, 1, 2, 0, 1, 2]]

    labels = balanced_kmeans(points, 2, seed=0)

    assert labels[0] == labels[3] and labels[1] == labels[4] and labels[2] == labels[5]


def test_balanced_kmeans_keeps_initial_cluster_sizes():
    rng = np.random.default_rng(4)
    points = rng.random((7, 5)) < 0.3
    init = np.array([2, 0, 1, 0, 1, 0, 1])

    labels = balanced_kmeans(points, 3, seed=0, init_labels=init)

    np.testing.assert_array_equal(np.bincount(labels, minlength=3), [3, 3, 1])


@pytest.mark.parametrize("init", [[0, 0, 1], [0, 0, 1, 1, 2, 2], [0, 0, 1, -1]])
def test_balanced_kmeans_rejects_bad_initial_labels(init):
    points = np.eye(4, dtype=bool)

    with pytest.raises(ValueError):
        balanced_kmeans(points, 2, init_labels=init)


"""SINGLE MATRIX TESTS"""

@pytest.mark.parametrize("size", [2, 4])
def test_block_diagonal_is_recovered(size):
    rng = np.random.default_rng(size)
    mask = shuffled_block_diagonal(4, size, rng)
    tile = TileShape(size, size)

    rows, cols = permute_single(mask, tile, seed=0)

    assert count_zero_tiles(mask[np.ix_(rows, cols)], tile) == (12, 16)


def test_dense_mask_keeps_identity_count():
    mask = np.ones((8, 8), dtype=bool)

    rows, cols = permute_single(mask, TileShape(2, 2))

    assert count_zero_tiles(mask[np.ix_(rows, cols)], TileShape(2, 2)) == (0, 16)
    assert sorted(rows) == list(range(8)) and sorted(cols) == list(range(8))


# identity <= heuristic <= exhaustive optimum
def test_heuristic_within_oracle_bounds():
    rng = np.random.default_rng(42)
    ratios, identity_ratios = [], []
    for trial in range(200):
        rows, cols = (int(v) for v in rng.integers(2, 7, size=2))
        tile = TileShape(2, 2) if trial % 2 == 0 else TileShape(3, 3)
        mask = rng.random((rows, cols)) < rng.uniform(0.1, 0.6)

        identity, _ = count_zero_tiles(mask, tile)
        r, c = permute_single(mask, tile, seed=trial)
        heuristic, _ = count_zero_tiles(mask[np.ix_(r, c)], tile)
        optimum = brute_force_permute(mask, tile)

        assert identity <= heuristic <= optimum
        if optimum:
            ratios.append(heuristic / optimum)
            identity_ratios.append(identity / optimum)
    print(f"mean identity/optimum ratio: {np.mean(identity_ratios):.3f}")
    print(f"mean heuristic/optimum ratio: {np.mean(ratios):.3f}")
    assert np.mean(ratios) > np.mean(identity_ratios)


def test_oracle_finds_block_structure():
    mask = shuffled_block_diagonal(3, 2, np.random.default_rng(1))

    assert brute_force_permute(mask, TileShape(2, 2)) == 6


def test_oracle_handles_short_groups():
    # 3 rows in tiles of 2: the lone row sits against the padding
    mask = np.array([[1, 0, 0], [0, 0, 1], [1, 0, 0]], dtype=bool)

    assert brute_force_permute(mask, TileShape(2, 2)) == 2


@pytest.mark.parametrize("shape", [(9, 2), (2, 9)])
def test_oracle_size_limit(shape):
    with pytest.raises(OracleSizeError):
        brute_force_permute(np.ones(shape), TileShape(2, 2))


def test_empty_mask_is_rejected():
    with pytest.raises(ValueError):
        permute_single(np.zeros((0, 4)), TileShape(2, 2))


"""NETWORK TESTS"""

@pytest.mark.parametrize("seed", range(5))
def test_illustrative_network_counts(seed):
    good = masked_network(GOOD_MASKS)
    shuffled = apply_permutations(good, SHUFFLE)
    tile = TileShape(2, 2)

    assert sum(int(m.sum()) for m in good.masks) == 34
    assert network_zero_tiles(good.masks, tile) == (7, 22)
    assert network_zero_tiles(shuffled.masks, tile) == (2, 22)
    # undoing the shuffle is a valid permutation with 7 zero tiles
    restored = apply_permutations(shuffled, SHUFFLE.inverse())
    assert network_zero_tiles(restored.masks, tile) == (7, 22)

    found = apply_permutations(shuffled, permute_network(shuffled, tile, seed=seed))
    # regrouping the rows of the last matrix alone lifts it from 1 to 3 zero tiles
    assert network_zero_tiles(found.masks, tile)[0] >= 4


def test_sparse_rows_are_regrouped():
    shuffled = apply_permutations(masked_network(GOOD_MASKS), SHUFFLE)
    mask = shuffled.masks[2]
    tile = TileShape(2, 2)

    rows, cols = permute_single(mask, tile, seed=0)

    assert count_zero_tiles(mask, tile) == (1, 8)
    assert count_zero_tiles(mask[np.ix_(rows, cols)], tile)[0] >= 3


def test_single_layer_network_matches_permute_single():
    rng = np.random.default_rng(3)
    mask = rng.random((12, 10)) < 0.3
    tile = TileShape(2, 2)

    perms = permute_network(masked_network([mask]), tile, seed=5)
    rows, cols = permute_single(mask, tile, seed=5)

    np.testing.assert_array_equal(perms.p_out, rows)
    np.testing.assert_array_equal(perms.p_in, cols)


def test_permute_network_does_not_touch_the_network():
    rng = np.random.default_rng(0)
    net = masked_network([rng.random((6, 8)) < 0.3, rng.random((8, 6)) < 0.3], rng)
    before = [layer.weights.copy() for layer in net.layers]

    permute_network(net, TileShape(2, 2))

    for a, layer in zip(before, net.layers):
        np.testing.assert_array_equal(a, layer.weights)


# permuted networks compute the same function once P_in / P_out are applied
@pytest.mark.parametrize("trial", range(100))
def test_permutation_preserves_function(trial):
    rng = np.random.default_rng(trial)
    tile = TileShape(*(2 * [int(rng.choice([2, 4, 8, 16]))]))
    width = int(rng.integers(4, 13))
    dims = [width] + [int(d) for d in rng.integers(3, 11, size=int(rng.integers(1, 3)))] + [width]
    density = rng.uniform(0.1, 0.5)
    masks = [rng.random((o, i)) < density for i, o in zip(dims[:-1], dims[1:])]
    net = masked_network(masks, rng, dyadic=True)
    x = rng.integers(0, 5, size=(5, width)) / 4.0

    perms = permute_network(net, tile, seed=trial, max_iters=4)
    permuted = apply_permutations(net, perms)

    expected, _ = forward(net, x)
    got, _ = forward(permuted, perms.permute_input(x))
    np.testing.assert_array_equal(perms.restore_output(got), expected)
    zero_before, _ = network_zero_tiles(net.masks, tile)
    zero_after, _ = network_zero_tiles(permuted.masks, tile)
    assert zero_after >= zero_before


def test_inverse_restores_network_exactly():
    rng = np.random.default_rng(7)
    net = masked_network([rng.random((5, 7)) < 0.5, rng.random((7, 5)) < 0.5], rng)
    perms = LayerPermutations([rng.permutation(d) for d in net.dims])

    restored = apply_permutations(apply_permutations(net, perms), perms.inverse())

    for a, b in zip(net.layers, restored.layers):
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.bias, b.bias)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_permutation_vectors_are_validated():
    with pytest.raises(ValueError):
        LayerPermutations([[0, 0, 1]])


def test_permutation_sizes_must_match_network():
    net = masked_network([np.ones((3, 4))])

    with pytest.raises(ValueError):
        apply_permutations(net, LayerPermutations([np.arange(3), np.arange(3)]))
