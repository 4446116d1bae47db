import os
import sys

import numpy as np
import pytest

cur_dir = os.path.dirname(os.path.abspath(__file__))
src_path = os.path.dirname(cur_dir)
if src_path not in sys.path:
    sys.path.append(src_path)

from src.data.load_mnist_data import synthetic_dataset
from src.hesim.op_counts import LATENCY_WEIGHTS_MS, OpCounts, reduction
from src.hesim.simulate import (
    EquivalenceError,
    memory_estimate,
    simulate_inference,
    verify_equivalence,
)
from src.nn.autoencoder import FCLayer, Network, build_autoencoder, build_network
from src.permute.permute import count_zero_tiles
from src.pruning.prune import PruneConfig, prune
from src.tiling.tile_tensor import TileShape


"""OP COUNT TESTS"""

@pytest.mark.parametrize("t", [2, 4, 8, 16])
def test_single_dense_tile_closed_form(t):
    rng = np.random.default_rng(t)
    net = Network([FCLayer(rng.normal(size=(t, t)), rng.normal(size=t))])
    tile = TileShape(t, t, 4)

    report = simulate_inference(net, rng.random((4, t)), tile)

    log_t = int(np.log2(t))
    # product, reduction, bias, then the square
    assert report.counts == OpCounts(add=log_t + 1, mul=2, rot=log_t, relin=2)
    assert report.deviation <= 1e-9


def test_all_zero_layer_costs_nothing_until_bias():
    layer0 = FCLayer(np.ones((4, 4)), np.zeros(4))
    layer1 = FCLayer(np.zeros((4, 4)), np.ones(4))
    net = Network([layer0, layer1], square_output=False)
    tile = TileShape(4, 4, 2)
    single = simulate_inference(Network([layer0.copy()]), np.ones((2, 4)), tile)

    report = simulate_inference(net, np.ones((2, 4)), tile)

    # the linear second layer adds no mul and no rotation, its bias only fills the flag
    assert report.counts.mul == single.counts.mul
    assert report.counts.rot == single.counts.rot
    assert report.allocated_tiles == [1, 0]
    np.testing.assert_array_equal(report.output, np.ones((2, 4)))


def test_zero_input_is_exact():
    net = build_network([12, 6], seed=0)

    report = simulate_inference(net, np.zeros((3, 12)), TileShape(4, 4, 4))

    assert report.deviation == 0.0


def test_more_zero_tiles_never_cost_more():
    net = build_network([32, 16, 32], seed=0)
    x = synthetic_dataset(0, 4, 32).samples
    tile = TileShape(4, 4, 4)
    dense = simulate_inference(net, x, tile)

    prune(net, PruneConfig.parse("Lc/L1/Wei", fraction=0.9))
    pruned = simulate_inference(net, x, tile)

    assert pruned.counts.mul <= dense.counts.mul
    assert pruned.counts.add <= dense.counts.add
    assert pruned.deviation <= 1e-9


def test_latency_proxy_weights_the_counts():
    counts = OpCounts(add=10, mul=2, rot=1, relin=1)

    expected = 10 * LATENCY_WEIGHTS_MS["add"] + 2 * LATENCY_WEIGHTS_MS["mul"] + 0.79 * 2
    assert counts.latency_proxy() == pytest.approx(expected)


def test_reduction_ratios():
    cuts = reduction(OpCounts(100, 23869, 10, 10), OpCounts(50, 1412, 10, 0))

    assert cuts["mul"] == pytest.approx(0.94, abs=0.005)
    assert cuts["add"] == pytest.approx(0.5)
    assert cuts["rot"] == 0.0 and cuts["relin"] == 1.0


"""VALIDATION TESTS"""

def test_rectangular_tiles_are_rejected():
    with pytest.raises(ValueError):
        simulate_inference(build_network([4, 4]), np.ones((1, 4)), TileShape(2, 4, 1))


def test_batch_width_must_match():
    with pytest.raises(ValueError):
        simulate_inference(build_network([4, 4]), np.ones((1, 5)), TileShape(2, 2, 1))


"""MEMORY TESTS"""

def test_dense_autoenc1_at_16x16():
    estimate = memory_estimate(build_autoencoder("autoenc1"), TileShape.from_slots(16, 16))

    assert estimate.allocated == 196
    assert estimate.bytes == 196 * 16384 * 16


def test_all_zero_network_has_no_weight_memory():
    net = Network([FCLayer(np.zeros((8, 8)), np.ones(8))])

    assert memory_estimate(net, TileShape(4, 4)).bytes == 0


def test_memory_matches_allocated_tiles():
    net = build_network([40, 20, 40], seed=1)
    prune(net, PruneConfig.parse("Lc/L1/Wei", fraction=0.8))
    tile = TileShape(4, 4, 8)
    estimate = memory_estimate(net, tile)

    report = simulate_inference(net, synthetic_dataset(1, 8, 40).samples, tile)

    assert report.allocated_tiles == estimate.allocated_tiles
    assert report.memory_bytes == estimate.bytes
    zero = sum(count_zero_tiles(m, tile)[0] for m in net.masks)
    assert estimate.allocated == estimate.total - zero


"""EQUIVALENCE TESTS"""

@pytest.mark.parametrize("arch", ["autoenc1", "autoenc2", "autoenc3"])
@pytest.mark.parametrize("t", [2, 4, 8, 16])
def test_simulation_matches_plaintext(arch, t):
    net = build_autoencoder(arch, seed=0)
    data = synthetic_dataset(0, 128, 784)

    deviation = verify_equivalence(net, data, TileShape.from_slots(t, t), tolerance=1e-9, batch_size=128)

    assert deviation <= 1e-9


def test_pruned_network_matches_plaintext():
    net = build_network([30, 12, 6, 12, 30], seed=2)
    prune(net, PruneConfig.parse("-/Rnd/Wei", fraction=0.7), seed=2)

    assert verify_equivalence(net, synthetic_dataset(2, 10, 30), TileShape(4, 4, 4)) <= 1e-9


def test_deviation_names_layer_and_tile(monkeypatch):
    from src.hesim import simulate

    net = build_network([8, 4, 8], seed=0)
    real_forward = simulate.forward

    def skewed_forward(n, batch):
        out, cache = real_forward(n, batch)
        cache.inputs[1] = cache.inputs[1] + 1.0
        return out, cache

    monkeypatch.setattr(simulate, "forward", skewed_forward)
    with pytest.raises(EquivalenceError) as error:
        verify_equivalence(net, synthetic_dataset(0, 2, 8), TileShape(2, 2, 2))
    assert "Layer 0" in str(error.value)
