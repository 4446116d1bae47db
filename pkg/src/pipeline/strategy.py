"""Prune / permute / expand / pack strategies and the grid search over them.

Every strategy starts from an already trained network (pre-training is shared
between grid points) and runs its stage sequence on a clone:

    P2   Train -> Prune -> Retrain -> Pack
    P2T  Train -> Prune^pack -> Retrain -> Pack
    P3   Train -> Prune -> Permute -> Retrain -> Pack
    P3E  Train -> Prune -> Permute -> Expand -> Retrain -> Pack
    P4   Train -> Prune -> Permute -> Prune^pack -> Retrain -> Pack
    P4E  Train -> Prune -> Permute -> Prune^pack -> Expand -> Retrain -> Pack
"""

import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.hesim.simulate import memory_estimate, simulate_inference
from src.nn.autoencoder import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
    AdamState,
    evaluate,
    train,
)
from src.permute.permute import (
    LayerPermutations,
    apply_permutations,
    count_zero_tiles,
    permute_network,
)
from src.pruning.prune import (
    TILE_REDUCTIONS,
    Target,
    expand,
    prune,
    prune_pack,
    prune_pack_threshold,
)
from src.tiling.tile_tensor import zero_histogram
from src.utils.utils import stage_timer

SCHEME_SEQUENCES = {
    "P2": "Train -> Prune -> Retrain -> Pack",
    "P2T": "Train -> Prune^pack -> Retrain -> Pack",
    "P3": "Train -> Prune -> Permute -> Retrain -> Pack",
    "P3E": "Train -> Prune -> Permute -> Expand -> Retrain -> Pack",
    "P4": "Train -> Prune -> Permute -> Prune^pack -> Retrain -> Pack",
    "P4E": "Train -> Prune -> Permute -> Prune^pack -> Expand -> Retrain -> Pack",
}
SHARED_PRETRAINING_NOTE = (
    "pre-training is shared across grid points: each point starts from a clone "
    "of one trained network instead of training its own"
)


@dataclass(frozen=True)
class Strategy:
    """One scheme with its pruning configuration and tile shape.

    ``retrain_epochs=None`` takes the architecture's default re-training
    epochs (10 for autoenc1, 20 for autoenc2 and autoenc3).
    """

    name: str
    prune_cfg: object
    tile: object
    threshold_n: int = None
    retrain_epochs: int = None
    seed: int = 0
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE

    def __post_init__(self):
        if self.name not in SCHEME_SEQUENCES:
            raise ValueError(f"Unknown strategy {self.name!r}, expected one of {list(SCHEME_SEQUENCES)}")
        if self.name == "P2T":
            if self.prune_cfg.criterion not in TILE_REDUCTIONS:
                raise ValueError(f"P2T needs a tile criterion (T-Avg, T-Max or T-Min), got {self.prune_cfg}")
        elif self.prune_cfg.target is Target.TILE:
            raise ValueError(f"{self.name} prunes weights or neurons first, got {self.prune_cfg}")
        if self.name in ("P4", "P4E") and self.threshold_n is None:
            raise ValueError(f"{self.name} needs the non-zero threshold N")
        if self.threshold_n is not None and self.threshold_n < 0:
            raise ValueError(f"Expected N >= 0, got {self.threshold_n}")
        if self.retrain_epochs is not None and self.retrain_epochs < 0:
            raise ValueError(f"Expected retrain_epochs >= 0, got {self.retrain_epochs}")

    @property
    def stages(self):
        return SCHEME_SEQUENCES[self.name].split(" -> ")

    def epochs_for(self, arch):
        if self.retrain_epochs is not None:
            return self.retrain_epochs
        if arch not in DEFAULT_EPOCHS:
            raise ValueError(f"No default re-training epochs for architecture {arch!r}; set retrain_epochs")
        return DEFAULT_EPOCHS[arch][1]


@dataclass
class Report:
    """Everything one strategy run measured."""

    strategy: str
    prune: str
    fraction: float
    tile: str
    threshold_n: int
    seed: int
    arch: str
    stage_log: list = field(default_factory=list)
    loss_before: float = None
    loss_after: float = None
    zero_tiles: list = field(default_factory=list)
    total_tiles: list = field(default_factory=list)
    stage_zero_fractions: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    allocated_tiles: int = None
    memory_bytes: int = None
    sim: dict = None
    timings: dict = field(default_factory=dict)
    notes: list = field(default_factory=lambda: [SHARED_PRETRAINING_NOTE])

    @property
    def zero_fraction(self):
        total = sum(self.total_tiles)
        return sum(self.zero_tiles) / total if total else 0.0

    @property
    def sequence(self):
        return " -> ".join(self.stage_log)

    def to_row(self):
        sim = self.sim or {}
        return {
            "strategy": self.strategy,
            "prune": self.prune,
            "fraction": float(self.fraction),
            "tile": self.tile,
            "n": self.threshold_n,
            "seed": int(self.seed),
            "loss": self.loss_after,
            "zero_tile_pct": 100.0 * self.zero_fraction,
            "add": sim.get("add"),
            "mul": sim.get("mul"),
            "rot": sim.get("rot"),
            "relin": sim.get("relin"),
            "allocated_tiles": self.allocated_tiles,
            "memory_bytes": self.memory_bytes,
            "latency_ms": sim.get("latency_ms"),
        }


def zero_tile_summary(net, tile):
    """Per-layer (zero, total) tile counts of the network's masks."""
    counts = [count_zero_tiles(mask, tile) for mask in net.masks]
    return [z for z, _ in counts], [t for _, t in counts]


def _record(report, stage, net, tile):
    zero, total = zero_tile_summary(net, tile)
    report.stage_zero_fractions[stage] = sum(zero) / sum(total)
    report.histograms[stage] = np.sum([zero_histogram(m, tile) for m in net.masks], axis=0).tolist()


def _retrain(net, perms, strategy, train_data, epochs):
    # trains in the original neuron order so inputs and targets line up,
    # Adam being elementwise the permuted network gets the same update
    base = apply_permutations(net, perms.inverse())
    adam = AdamState.for_network(base, strategy.learning_rate)
    train(base, train_data, epochs, batch_size=strategy.batch_size, adam=adam, seed=strategy.seed)
    return apply_permutations(base, perms)


def run_strategy(strategy, trained, train_data, test_data, simulate=True, sim_batch=16):
    """Runs one strategy's stage sequence on a clone of the trained network.

    Parameters
    ----------
    strategy : Strategy
        Scheme, prune configuration and tile shape
    trained : Network
        Pre-trained network, left untouched
    train_data : Dataset
        Re-training samples
    test_data : Dataset
        Samples for the reported test loss and the packed simulation
    simulate : bool, optional
        Run the mock-HE inference at the Pack stage (square tiles only), by default True
    sim_batch : int, optional
        Test samples pushed through the simulation, by default 16

    Returns
    -------
    tuple
        (network in deployment (permuted) order, LayerPermutations, Report)
    """
    if train_data.dim != trained.in_dim or test_data.dim != trained.in_dim:
        raise ValueError(f"Data has {train_data.dim} features, network expects {trained.in_dim}")
    tile = strategy.tile
    cfg = strategy.prune_cfg
    net = trained.copy()
    perms = LayerPermutations.identity(net)
    report = Report(
        strategy=strategy.name,
        prune=str(cfg),
        fraction=cfg.fraction,
        tile=str(tile),
        threshold_n=strategy.threshold_n,
        seed=strategy.seed,
        arch=trained.arch,
        stage_log=["Train"],
    )
    report.loss_before = evaluate(net, test_data)
    _record(report, "Train", net, tile)

    for stage in strategy.stages[1:]:
        with stage_timer(report.timings, stage):
            if stage == "Prune":
                prune(net, cfg, seed=strategy.seed)
            elif stage == "Prune^pack" and strategy.name == "P2T":
                prune_pack(net, tile, cfg.criterion, cfg.scope, cfg.fraction)
            elif stage == "Prune^pack":
                prune_pack_threshold(net, tile, strategy.threshold_n)
            elif stage == "Permute":
                perms = permute_network(net, tile, seed=strategy.seed)
                net = apply_permutations(net, perms)
            elif stage == "Expand":
                expand(net, tile)
            elif stage == "Retrain":
                net = _retrain(net, perms, strategy, train_data, strategy.epochs_for(trained.arch))
            elif stage == "Pack":
                estimate = memory_estimate(net, tile)
                report.allocated_tiles = estimate.allocated
                report.memory_bytes = estimate.bytes
                if simulate and tile.t1 == tile.t2:
                    batch = perms.permute_input(test_data.samples[:sim_batch])
                    report.sim = simulate_inference(net, batch, tile).as_dict()
        report.stage_log.append(stage)
        _record(report, stage, net, tile)
        print(f"{strategy.name} {stage}: zero tiles {100.0 * report.stage_zero_fractions[stage]:.1f}%")

    report.zero_tiles, report.total_tiles = zero_tile_summary(net, tile)
    report.loss_after = evaluate(apply_permutations(net, perms.inverse()), test_data)
    return net, perms, report


def min_loss_with_zero_tiles(min_fraction):
    """Objective: lowest test loss among points with at least ``min_fraction`` zero tiles."""

    def objective(report):
        return -report.loss_after if report.zero_fraction >= min_fraction else None

    return objective


def max_zero_tiles_with_loss(max_loss):
    """Objective: most zero tiles among points whose test loss is at most ``max_loss``."""

    def objective(report):
        return report.zero_fraction if report.loss_after <= max_loss else None

    return objective


@dataclass
class GridSearchResult:
    best_network: object
    best_permutations: object
    best_report: Report
    reports: list


def grid_points(template, fractions, tile_shapes, n_values):
    """Strategies of the grid in order: fraction, then tile shape, then N."""
    if not fractions or not tile_shapes:
        raise ValueError("empty grid: fractions and tile_shapes need at least one value")
    thresholds = list(n_values) if template.name in ("P4", "P4E") else [template.threshold_n]
    if not thresholds:
        raise ValueError(f"empty grid: {template.name} needs at least one N value")
    points = []
    for fraction in fractions:
        cfg = replace(template.prune_cfg, fraction=fraction)
        for tile in tile_shapes:
            for n in thresholds:
                points.append(replace(template, prune_cfg=cfg, tile=tile, threshold_n=n))
    return points


def grid_search(base, template, train_data, test_data, fractions, tile_shapes, n_values, objective, simulate=True, sim_batch=16):
    """Runs the template strategy at every grid point and keeps the best.

    Each point starts from the same pre-trained ``base``. ``objective`` maps a
    Report to a score (higher is better) or None when the point is infeasible;
    ties go to the first point in grid order. When no point is feasible the
    best fields are None and every report is still returned.
    """
    best = GridSearchResult(None, None, None, [])
    best_score = None
    for point in grid_points(template, fractions, tile_shapes, n_values):
        print(f"Grid point {point.name} {point.prune_cfg} f={point.prune_cfg.fraction} tile={point.tile} N={point.threshold_n}")
        net, perms, report = run_strategy(point, base, train_data, test_data, simulate, sim_batch)
        best.reports.append(report)
        score = objective(report)
        if score is not None and (best_score is None or score > best_score):
            best_score = score
            best.best_network, best.best_permutations, best.best_report = net, perms, report
    return best
