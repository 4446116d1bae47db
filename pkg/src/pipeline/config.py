"""Pipeline and sweep configuration files (JSON).

Example
-------
{
  "architecture": "autoenc2",
  "strategy": "P4E",
  "prune": "Lc/L1/Wei",
  "fractions": [0.9],
  "tile_shapes": ["4x4", "8x8"],
  "n_values": [16],
  "seeds": [0, 1, 2],
  "epochs": {"train": 30, "retrain": 20},
  "objective": {"name": "min_loss", "min_zero_tiles": 0.5}
}

Missing optional keys take the defaults below.
"""

import json
import os
import sys
from dataclasses import asdict, dataclass, field

SRC_PATH = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if SRC_PATH not in sys.path:
    sys.path.append(SRC_PATH)
from src.nn.autoencoder import (
    ARCHITECTURES,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
)
from src.pipeline.strategy import (
    SCHEME_SEQUENCES,
    Strategy,
    max_zero_tiles_with_loss,
    min_loss_with_zero_tiles,
)
from src.pruning.prune import PruneConfig
from src.tiling.tile_tensor import DEFAULT_SLOTS, TileShape
from src.utils.utils import config_hash

REQUIRED_KEYS = ("architecture", "strategy", "prune", "fractions", "tile_shapes")
OPTIONAL_DEFAULTS = {
    "n_values": [],
    "seeds": [0],
    "epochs": None,
    "batch_size": DEFAULT_BATCH_SIZE,
    "learning_rate": DEFAULT_LEARNING_RATE,
    "slots": DEFAULT_SLOTS,
    "square_output": True,
    "sim_batch": 16,
    "train_limit": None,
    "objective": {"name": "min_loss", "min_zero_tiles": 0.0},
}
OBJECTIVES = {
    "min_loss": ("min_zero_tiles", min_loss_with_zero_tiles),
    "max_zero_tiles": ("max_loss", max_zero_tiles_with_loss),
}


@dataclass
class PipelineConfig:
    architecture: str
    strategy: str
    prune: str
    fractions: list
    tile_shapes: list
    n_values: list = field(default_factory=list)
    seeds: list = field(default_factory=lambda: [0])
    epochs: dict = None
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    slots: int = DEFAULT_SLOTS
    square_output: bool = True
    sim_batch: int = 16
    train_limit: int = None
    objective: dict = None

    @property
    def train_epochs(self):
        return self.epochs["train"]

    @property
    def retrain_epochs(self):
        return self.epochs["retrain"]

    def tiles(self):
        return [TileShape.parse(t, self.slots, evaluated_only=True) for t in self.tile_shapes]

    def template(self, seed):
        """Strategy at the first grid point; grid_search varies fraction, tile and N."""
        n_values = self.n_values or [None]
        return Strategy(
            name=self.strategy,
            prune_cfg=PruneConfig.parse(self.prune, fraction=self.fractions[0]),
            tile=self.tiles()[0],
            threshold_n=n_values[0],
            retrain_epochs=self.retrain_epochs,
            seed=seed,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
        )

    def build_objective(self):
        key, factory = OBJECTIVES[self.objective["name"]]
        return factory(self.objective[key])

    def to_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.to_dict())


def parse_config(raw):
    """Validates a configuration dict and fills in defaults.

    Raises
    ------
    ValueError
        Missing keys, unknown names, or values out of range.
    """
    if not isinstance(raw, dict):
        raise ValueError(f"Expected a JSON object at the top level, got {type(raw).__name__}")
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise ValueError(f"Config is missing required keys: {missing}")
    unknown = sorted(set(raw) - set(REQUIRED_KEYS) - set(OPTIONAL_DEFAULTS))
    if unknown:
        raise ValueError(f"Config has unknown keys: {unknown}")

    values = {**OPTIONAL_DEFAULTS, **raw}
    arch = str(values["architecture"]).lower()
    if arch not in ARCHITECTURES:
        raise ValueError(f"Unknown architecture {values['architecture']!r}, expected one of {sorted(ARCHITECTURES)}")
    values["architecture"] = arch
    if values["strategy"] not in SCHEME_SEQUENCES:
        raise ValueError(f"Unknown strategy {values['strategy']!r}, expected one of {list(SCHEME_SEQUENCES)}")

    for key in ("fractions", "tile_shapes", "seeds"):
        if not isinstance(values[key], list) or not values[key]:
            raise ValueError(f"{key!r} must be a non-empty list")
    for f in values["fractions"]:
        PruneConfig.parse(values["prune"], fraction=f)
    if values["strategy"] in ("P4", "P4E") and not values["n_values"]:
        raise ValueError(f"{values['strategy']} needs a non-empty 'n_values' list")
    if any(int(n) != n or n < 0 for n in values["n_values"]):
        raise ValueError(f"'n_values' must hold non-negative integers, got {values['n_values']}")
    if any(int(s) != s or s < 0 for s in values["seeds"]):
        raise ValueError(f"'seeds' must hold non-negative integers, got {values['seeds']}")

    train_default, retrain_default = DEFAULT_EPOCHS[arch]
    epochs = values["epochs"] or {}
    values["epochs"] = {
        "train": int(epochs.get("train", train_default)),
        "retrain": int(epochs.get("retrain", retrain_default)),
    }
    if min(values["epochs"].values()) < 0:
        raise ValueError(f"Epochs must be >= 0, got {values['epochs']}")
    if values["batch_size"] < 1 or values["sim_batch"] < 1:
        raise ValueError("batch_size and sim_batch must be >= 1")
    if values["learning_rate"] <= 0:
        raise ValueError(f"learning_rate must be > 0, got {values['learning_rate']}")

    objective = values["objective"]
    if not isinstance(objective, dict) or objective.get("name") not in OBJECTIVES:
        raise ValueError(f"Objective name must be one of {sorted(OBJECTIVES)}, got {objective!r}")
    bound_key = OBJECTIVES[objective["name"]][0]
    if bound_key not in objective:
        raise ValueError(f"Objective {objective['name']!r} needs {bound_key!r}")

    config = PipelineConfig(**values)
    # tile widths, then strategy / prune-string compatibility
    config.template(config.seeds[0])
    return config


def load_config(path):
    """Reads and validates a JSON configuration file."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"{path} is not valid JSON: {e}") from None
    return parse_config(raw)
