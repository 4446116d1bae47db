import json
import os
import sys

import numpy as np
import pytest

cur_dir = os.path.dirname(os.path.abspath(__file__))
src_path = os.path.dirname(cur_dir)
if src_path not in sys.path:
    sys.path.append(src_path)

from src.cli.hepex import main
from src.data.load_mnist_data import MNIST_DIR_ENV
from src.nn.autoencoder import FCLayer, Network, build_network, save_checkpoint
from src.pruning.prune import PruneConfig, prune


@pytest.fixture
def ckpt(tmp_path):
    net = build_network([12, 6, 12], seed=0)
    prune(net, PruneConfig.parse("Lc/L1/Wei", fraction=0.5))
    path = tmp_path / "model.npz"
    save_checkpoint(path, net, config={"seed": 0})
    return str(path)


@pytest.fixture(autouse=True)
def no_mnist(monkeypatch):
    monkeypatch.delenv(MNIST_DIR_ENV, raising=False)


"""USAGE TESTS"""

@pytest.mark.parametrize("argv", [[], ["prune"], ["simulate", "--tile=4x4"]])
def test_bad_usage(argv):
    assert main(argv) == 1


def test_unknown_architecture(tmp_path):
    assert main(["train", "--arch=autoenc7", f"--out={tmp_path / 'x.npz'}"]) == 1


def test_missing_checkpoint(tmp_path):
    assert main(["simulate", f"--ckpt={tmp_path / 'missing.npz'}", "--tile=4x4"]) == 1


def test_missing_config(tmp_path, ckpt):
    argv = ["pipeline", f"--config={tmp_path / 'missing.json'}", f"--ckpt={ckpt}", f"--out={tmp_path}"]

    assert main(argv) == 1


def test_invalid_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"architecture": "autoenc1"}), encoding="utf-8")

    assert main(["sweep", f"--config={path}", f"--out={tmp_path}"]) == 1


"""SIMULATE TESTS"""

@pytest.mark.parametrize("tile", ["3x3", "32x32", "1x4"])
def test_simulate_rejects_unevaluated_tiles(ckpt, tile, capsys):
    assert main(["simulate", f"--ckpt={ckpt}", f"--tile={tile}"]) == 1
    assert "must each be one of [2, 4, 8, 16]" in capsys.readouterr().out


def test_simulate_prints_counts(ckpt, capsys):
    assert main(["simulate", f"--ckpt={ckpt}", "--tile=4x4", "--batch=4"]) == 0

    out = capsys.readouterr().out
    assert "config hash" in out
    assert "synthetic" in out
    assert "mul" in out and "Latency proxy" in out


def test_simulate_rejects_empty_batch(ckpt):
    assert main(["simulate", f"--ckpt={ckpt}", "--tile=4x4", "--batch=0"]) == 1


"""VERIFY TESTS"""

def test_verify_passes_on_a_pruned_network(ckpt, capsys):
    assert main(["verify", f"--ckpt={ckpt}", "--seed=3"]) == 0
    assert "All checks passed" in capsys.readouterr().out


def test_verify_fails_on_a_broken_gradient(ckpt, monkeypatch):
    from src.cli import hepex

    monkeypatch.setattr(hepex, "gradient_check", lambda net, batch, seed=0: 1.0)

    assert main(["verify", f"--ckpt={ckpt}"]) == 2


def test_verify_handles_all_zero_layers(tmp_path):
    net = Network([FCLayer(np.zeros((4, 8)), np.ones(4)), FCLayer(np.ones((8, 4)), np.zeros(8))])
    path = tmp_path / "zero.npz"
    save_checkpoint(path, net)

    assert main(["verify", f"--ckpt={path}"]) == 0
