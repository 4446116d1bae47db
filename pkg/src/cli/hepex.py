#!/usr/bin/env python

"""Packing-aware pruning toolkit: train, prune, permute, pack and simulate.

Usage:
  hepex.py train --arch=<arch> --out=<ckpt> [--mnist=<dir>] [--seed=<seed>] [--epochs=<n>] [--train_limit=<n>]
  hepex.py pipeline --config=<file> --ckpt=<ckpt> --out=<dir> [--mnist=<dir>] [--seed=<seed>]
  hepex.py sweep --config=<file> --out=<dir> [--mnist=<dir>]
  hepex.py simulate --ckpt=<ckpt> --tile=<t1xt2> [--batch=<b>] [--slots=<slots>] [--mnist=<dir>]
  hepex.py verify --ckpt=<ckpt> [--seed=<seed>]

Options:
--arch=<arch>           One of autoenc1, autoenc2, autoenc3
--out=<path>            Checkpoint file (train) or output folder (pipeline, sweep)
--mnist=<dir>           MNIST IDX folder, defaults to $HEPEX_MNIST_DIR or data/raw/mnist
--seed=<seed>           PRNG seed, 0 unless given (pipeline: first seed of the config)
--epochs=<n>            Training epochs, defaults to the architecture's value
--train_limit=<n>       Only train on the first n images
--config=<file>         JSON pipeline configuration
--ckpt=<ckpt>           Checkpoint written by train or pipeline
--tile=<t1xt2>          Tile shape; t1 and t2 in {2, 4, 8, 16}, t3 derived from --slots
--batch=<b>             Samples to push through the simulation [default: 16]
--slots=<slots>         Ciphertext slots per tile [default: 16384]

Exit codes: 0 success, 1 invalid input, 2 failed correctness check.
"""

import json
import os
import sys
from dataclasses import asdict

import numpy as np
from docopt import DocoptExit, docopt

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.data.load_mnist_data import (
    MNIST_DIR_ENV,
    load_mnist,
    synthetic_dataset,
)
from src.hesim.op_counts import OpCounts, reduction
from src.hesim.simulate import simulate_inference, verify_equivalence
from src.nn.autoencoder import (
    DEFAULT_EPOCHS,
    build_autoencoder,
    evaluate,
    forward,
    gradient_check,
    load_checkpoint,
    save_checkpoint,
    train,
)
from src.permute.permute import LayerPermutations, apply_permutations, count_zero_tiles
from src.pipeline.config import load_config
from src.pipeline.strategy import grid_search, run_strategy
from src.report.sweep_table import SweepTable, emit_csv, emit_json
from src.tiling.tile_tensor import TileShape, decode, pack_matrix
from src.utils.utils import config_hash, make_rng, mean_std_summary

GRADIENT_TOLERANCE = 1e-4
EQUIVALENCE_TOLERANCE = 1e-9


def _announce(seed, config):
    print(f"Seed: {seed}, config hash: {config_hash(config)}")


def _load_data(mnist_dir, train_limit=None):
    print("Loading MNIST...")
    train_set, test_set = load_mnist(mnist_dir)
    if train_limit:
        train_set = train_set.take(int(train_limit))
    return train_set, test_set


def _write(path, data):
    with open(path, "wb") as f:
        f.write(data)
    print(f"Wrote {path}")


def run_train(opt):
    arch = opt["--arch"].lower()
    if arch not in DEFAULT_EPOCHS:
        raise ValueError(f"Unknown architecture {opt['--arch']!r}, expected one of {sorted(DEFAULT_EPOCHS)}")
    seed = int(opt["--seed"] or 0)
    epochs = int(opt["--epochs"]) if opt["--epochs"] else DEFAULT_EPOCHS[arch][0]
    config = {"arch": arch, "seed": seed, "epochs": epochs, "train_limit": opt["--train_limit"]}
    _announce(seed, config)

    train_set, test_set = _load_data(opt["--mnist"], opt["--train_limit"])
    net = build_autoencoder(arch, seed)
    train(net, train_set, epochs, seed=seed, verbose=True)
    print(f"Test loss: {evaluate(net, test_set):.6e}")
    save_checkpoint(opt["--out"], net, config=config)
    print(f"Checkpoint saved to: {opt['--out']}")
    return 0


def run_pipeline(opt):
    config = load_config(opt["--config"])
    seed = int(opt["--seed"]) if opt["--seed"] is not None else config.seeds[0]
    _announce(seed, config.to_dict())

    trained, _, _ = load_checkpoint(opt["--ckpt"])
    if trained.arch != config.architecture:
        raise ValueError(f"Checkpoint holds {trained.arch}, config asks for {config.architecture}")
    train_set, test_set = _load_data(opt["--mnist"], config.train_limit)
    strategy = config.template(seed)
    net, perms, report = run_strategy(strategy, trained, train_set, test_set, sim_batch=config.sim_batch)

    os.makedirs(opt["--out"], exist_ok=True)
    save_checkpoint(os.path.join(opt["--out"], "model.npz"), net, config=config.to_dict(), permutations=perms.vectors)
    _write(os.path.join(opt["--out"], "report.json"), json.dumps(asdict(report), indent=1, default=float).encode("utf-8"))
    print(f"{report.sequence}: loss {report.loss_after:.6e}, zero tiles {100.0 * report.zero_fraction:.1f}%")
    return 0


def _baseline(net, tile, test_set, sim_batch):
    if tile.t1 != tile.t2:
        return None
    return simulate_inference(net, test_set.samples[:sim_batch], tile)


def run_sweep(opt):
    config = load_config(opt["--config"])
    _announce(config.seeds, config.to_dict())
    train_set, test_set = _load_data(opt["--mnist"], config.train_limit)
    table = SweepTable()
    os.makedirs(opt["--out"], exist_ok=True)

    for seed in config.seeds:
        print(f"Training {config.architecture} for {config.train_epochs} epochs with seed {seed}...")
        base = build_autoencoder(config.architecture, seed, config.square_output)
        train(base, train_set, config.train_epochs, batch_size=config.batch_size, seed=seed)
        result = grid_search(
            base,
            config.template(seed),
            train_set,
            test_set,
            config.fractions,
            config.tiles(),
            config.n_values,
            config.build_objective(),
            sim_batch=config.sim_batch,
        )
        baselines = {str(t): _baseline(base, t, test_set, config.sim_batch) for t in config.tiles()}
        for report in result.reports:
            row = report.to_row()
            reference = baselines[report.tile]
            if reference is not None and report.sim is not None:
                row["memory_reduction"] = 1.0 - report.memory_bytes / reference.memory_bytes
                row["latency_reduction"] = 1.0 - report.sim["latency_ms"] / reference.latency_ms
            table.append(row)
        if result.best_report is None:
            print(f"Seed {seed}: no grid point meets the objective")
            continue
        best = result.best_report
        print(f"Seed {seed} best: {best.tile} f={best.fraction} N={best.threshold_n}, "
              f"loss {best.loss_after:.6e}, zero tiles {100.0 * best.zero_fraction:.1f}%")
        reference = baselines[best.tile]
        if reference is not None and best.sim is not None:
            pruned = OpCounts(**{op: best.sim[op] for op in ("add", "mul", "rot", "relin")})
            cuts = reduction(reference.counts, pruned)
            print("Op reductions vs unpruned: " + ", ".join(f"{op} {100.0 * r:.0f}%" for op, r in cuts.items()))
        save_checkpoint(
            os.path.join(opt["--out"], f"best_seed{seed}.npz"),
            result.best_network,
            config=config.to_dict(),
            permutations=result.best_permutations.vectors,
        )

    _write(os.path.join(opt["--out"], "sweep.json"), emit_json(table))
    _write(os.path.join(opt["--out"], "sweep.csv"), emit_csv(table))
    if len(config.seeds) > 1:
        print(mean_std_summary(table.rows, ["strategy", "prune", "fraction", "tile", "n"], ["loss", "zero_tile_pct"]))
    return 0


def run_simulate(opt):
    tile = TileShape.parse(opt["--tile"], int(opt["--slots"]), evaluated_only=True)
    batch_size = int(opt["--batch"])
    if batch_size < 1:
        raise ValueError(f"Expected --batch >= 1, got {batch_size}")
    _announce(0, {"ckpt": opt["--ckpt"], "tile": str(tile), "batch": batch_size})

    net, _, vectors = load_checkpoint(opt["--ckpt"])
    perms = LayerPermutations(vectors) if vectors else LayerPermutations.identity(net)
    if opt["--mnist"] or os.environ.get(MNIST_DIR_ENV):
        _, test_set = load_mnist(opt["--mnist"])
        samples = test_set.samples[:batch_size]
    else:
        print("No MNIST folder given, simulating on synthetic inputs")
        samples = synthetic_dataset(0, batch_size, net.in_dim).samples
    report = simulate_inference(net, perms.permute_input(samples), tile)

    print(f"Tile {tile}: add {report.counts.add}, mul {report.counts.mul}, rot {report.counts.rot}, relin {report.counts.relin}")
    print(f"Allocated weight tiles {sum(report.allocated_tiles)} of {sum(report.total_tiles)} "
          f"({report.memory_bytes} bytes at {report.bytes_per_slot} bytes/slot)")
    print(f"Latency proxy {report.latency_ms:.1f} ms, max deviation from plaintext {report.deviation:.3e}")
    return 0


def run_verify(opt):
    seed = int(opt["--seed"] or 0)
    _announce(seed, {"ckpt": opt["--ckpt"], "verify": True})
    net, _, _ = load_checkpoint(opt["--ckpt"])
    x = synthetic_dataset(seed, 8, net.in_dim).samples

    error = gradient_check(net, x[:4], seed=seed)
    print(f"Gradient check: max relative error {error:.2e}")
    assert error < GRADIENT_TOLERANCE, f"gradient check failed with relative error {error:.2e}"

    rng = make_rng(seed)
    perms = LayerPermutations([rng.permutation(d) for d in net.dims])
    permuted = apply_permutations(net, perms)
    deviation = np.max(np.abs(perms.restore_output(forward(permuted, perms.permute_input(x))[0]) - forward(net, x)[0]))
    print(f"Permutation equivalence: max deviation {deviation:.2e}")
    assert deviation <= EQUIVALENCE_TOLERANCE, f"permuted network deviates by {deviation:.2e}"
    restored = apply_permutations(permuted, perms.inverse())
    assert all(np.array_equal(a.weights, b.weights) for a, b in zip(restored.layers, net.layers)), \
        "inverse permutation does not restore the weights"

    for tile in (TileShape.from_slots(t, t) for t in (2, 4, 8, 16)):
        for k, layer in enumerate(net.layers):
            packed = pack_matrix(layer.weights, tile)
            assert np.array_equal(decode(packed), layer.weights), f"tiling round trip failed at layer {k}, tile {tile}"
            zero, total = count_zero_tiles(layer.weights != 0.0, tile)
            assert packed.allocated == total - zero, f"allocated tiles disagree with zero tiles at layer {k}, tile {tile}"
    print("Tiling round trip: ok")

    worst = verify_equivalence(net, x, TileShape.from_slots(16, 16), EQUIVALENCE_TOLERANCE)
    print(f"Simulated inference: max deviation {worst:.2e}")
    print("All checks passed")
    return 0


COMMANDS = {
    "train": run_train,
    "pipeline": run_pipeline,
    "sweep": run_sweep,
    "simulate": run_simulate,
    "verify": run_verify,
}


def main(argv=None):
    try:
        opt = docopt(__doc__, argv=argv)
    except DocoptExit as e:
        print(e)
        return 1
    command = next(name for name in COMMANDS if opt[name])
    try:
        return COMMANDS[command](opt)
    except (ValueError, FileNotFoundError) as e:
        print(f"Error: {e}")
        return 1
    except AssertionError as e:
        print(f"Check failed: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
