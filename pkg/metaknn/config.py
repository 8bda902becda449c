"""Run configuration of the command line interface: built-in defaults, an optional YAML file and
command-line flags, merged with the precedence flags > file > defaults.
"""

__all__ = ["DEFAULTS", "RunConfig", "load_yaml", "merge"]

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from metaknn.constants import (
    ALPHA_GRID,
    DEFAULT_DOMAIN,
    EVAL_EVERY,
    KNN_GRID_K,
    KNN_GRID_LAMBDA,
    KNN_GRID_TEMPERATURE,
    LR_BASES,
    LR_EXPONENTS,
    OPL_LEARNING_RATES,
)
from metaknn.exceptions import MissingInputError
from metaknn.finetune import FtHyper, GridSpec
from metaknn.prediction import Hyper
from metaknn.synthdata import SynthConfig

logger = logging.getLogger(__name__)

# Unset retrieval values (None) fall back to the domain settings of the selected metric.
DEFAULTS = {
    "domain": DEFAULT_DOMAIN,
    "seed": None,
    "report_format": "json",
    "hyper": {"k": None, "lambda": None, "temperature": None, "metric": "ip"},
    "finetune": {"lr": None, "alpha": 0.0, "steps": 500, "batch": 64, "eval_every": EVAL_EVERY, "patience": None},
    "grid": {
        "lr_bases": list(LR_BASES),
        "lr_exponents": list(LR_EXPONENTS),
        "alphas": list(ALPHA_GRID),
        "strategy": "full",
    },
    "knn_grid": {
        "k": list(KNN_GRID_K),
        "lambda": list(KNN_GRID_LAMBDA),
        "temperature": list(KNN_GRID_TEMPERATURE),
    },
    "synth": {},
}

REPORT_FORMATS = ("json", "csv")
STRATEGIES = ("full", "staged")


def load_yaml(path) -> dict:
    """Read a YAML configuration file; an empty file is an empty mapping."""
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"Configuration file '{path}' not found")
    with open(path) as f:
        config = yaml.safe_load(f) or {}
    if not isinstance(config, dict):
        raise ValueError(f"Configuration file '{path}' must hold a mapping at top level")
    return config


def merge(base: dict, override: dict) -> dict:
    """Recursive merge of ``override`` into a copy of ``base``; None values in ``override`` are skipped."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass(frozen=True)
class RunConfig:
    """
    Fully resolved settings of one subcommand.

    Attributes
    ----------
    command : str
        Subcommand name.
    hyper : Hyper
        Retrieval settings.
    ft : FtHyper
        Fine-tuning settings.
    grid : GridSpec
        Fine-tuning search grid.
    strategy : str
        Fine-tuning search strategy, ``"full"`` or ``"staged"``.
    knn_grid : dict
        Candidate ``k``, ``lambda`` and ``temperature`` lists of the retrieval search.
    synth : SynthConfig
        Synthetic-task settings.
    seed : int
        Seed of every random stream.
    report_format : str
        ``"json"`` or ``"csv"``.
    eval_every : int
        Validation interval of full-data fine-tuning.
    patience : int or None
        Early-stopping patience of full-data fine-tuning.
    paths : dict of str to Path
        Input and output paths of the subcommand.
    raw : dict
        The merged mapping, echoed in report headers.
    """

    command: str
    hyper: Hyper
    ft: FtHyper
    grid: GridSpec
    strategy: str
    knn_grid: dict
    synth: SynthConfig
    seed: int
    report_format: str
    eval_every: int
    patience: int | None
    paths: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.report_format not in REPORT_FORMATS:
            raise ValueError(f"Report format '{self.report_format}' must be one of {REPORT_FORMATS}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"Search strategy '{self.strategy}' must be one of {STRATEGIES}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ValueError(f"Seed {self.seed} must be a non-negative integer")

    @classmethod
    def resolve(
        cls,
        command: str,
        defaults: dict | None = None,
        file: dict | None = None,
        flags: dict | None = None,
        paths: dict | None = None,
    ) -> "RunConfig":
        """
        Merge the three configuration layers and build the typed settings.

        Parameters
        ----------
        command : str
            Subcommand name.
        defaults : dict, optional
            Lowest layer, :data:`DEFAULTS` when None.
        file : dict, optional
            Mapping read from a YAML file.
        flags : dict, optional
            Command-line values, nested like the file; None entries mean "not given".
        paths : dict, optional
            Input and output paths.

        Returns
        -------
        RunConfig
            The resolved configuration.
        """
        raw = merge(merge(DEFAULTS if defaults is None else defaults, file or {}), flags or {})

        h = raw["hyper"]
        base = Hyper.for_domain(h.get("metric", "ip"), raw.get("domain", DEFAULT_DOMAIN))
        hyper = Hyper(
            k=int(h["k"]) if h.get("k") is not None else base.k,
            lam=float(h["lambda"]) if h.get("lambda") is not None else base.lam,
            temperature=float(h["temperature"]) if h.get("temperature") is not None else base.temperature,
            metric=base.metric,
        )

        f = raw["finetune"]
        domain = str(raw.get("domain", DEFAULT_DOMAIN)).lower()
        lr = f.get("lr")
        ft = FtHyper(
            lr=float(lr) if lr is not None else OPL_LEARNING_RATES.get(domain, OPL_LEARNING_RATES[DEFAULT_DOMAIN]),
            alpha=float(f.get("alpha", 0.0)),
            steps=int(f.get("steps", 500)),
            batch=int(f.get("batch", 64)),
        )

        g = raw["grid"]
        grid = GridSpec(
            lr_candidates=tuple(
                float(f"{base_lr}e{exponent}") for exponent in g["lr_exponents"] for base_lr in g["lr_bases"]
            ),
            alpha_candidates=tuple(g["alphas"]),
        )

        kg = raw["knn_grid"]
        knn_grid = {
            "k": tuple(int(k) for k in kg["k"]),
            "lambda": tuple(float(x) for x in kg["lambda"]),
            "temperature": tuple(float(x) for x in kg["temperature"]),
        }

        seed = int(raw["seed"]) if raw.get("seed") is not None else 0
        synth_layer = raw.get("synth", {})
        if raw.get("seed") is not None:
            synth_layer = {"seed": seed} | synth_layer
        synth = SynthConfig.from_dict(synth_layer)
        patience = f.get("patience")

        config = cls(
            command=command,
            hyper=hyper,
            ft=ft,
            grid=grid,
            strategy=str(g.get("strategy", "full")),
            knn_grid=knn_grid,
            synth=synth,
            seed=seed,
            report_format=str(raw["report_format"]),
            eval_every=int(f.get("eval_every", EVAL_EVERY)),
            patience=int(patience) if patience is not None else None,
            paths={name: Path(p) for name, p in (paths or {}).items() if p is not None},
            raw=raw,
        )
        logger.debug("Resolved configuration for '%s': %s", command, config.echo())
        return config

    def require(self, *names: str) -> None:
        """Check that the named input paths exist before any work begins."""
        for name in names:
            path = self.paths.get(name)
            if path is None:
                raise ValueError(f"Missing required path '{name}'")
            if not path.exists():
                raise MissingInputError(f"Input '{name}' not found at '{path}'")

    def echo(self) -> dict:
        """Plain mapping of the effective settings for report headers."""
        return {
            "command": self.command,
            "seed": self.seed,
            "hyper": {
                "k": self.hyper.k,
                "lambda": self.hyper.lam,
                "temperature": self.hyper.temperature,
                "metric": self.hyper.metric.value,
            },
            "finetune": asdict(self.ft) | {"eval_every": self.eval_every, "patience": self.patience},
            "strategy": self.strategy,
            "synth": asdict(self.synth),
            "paths": {name: str(path) for name, path in self.paths.items()},
        }
