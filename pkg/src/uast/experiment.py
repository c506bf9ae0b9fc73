"""Experiment configuration files and per-seed artifact writing.

An experiment file is JSON::

    {
      "dataset": {"synthetic": {"kind": "two_moons", "rotation": 30, ...}}
                 or {"csv": {"labeled": ..., "unlabeled": ..., "test": ..., "class_count": 2}},
      "round": {... RoundConfig overrides ...},
      "output_dir": "runs/name",
      "seeds": [0, 1, 2]
    }

Relative CSV paths and ``output_dir`` are resolved against the directory
of the experiment file (the working directory for the bundled one).
Synthetic data without an explicit ``seed`` is drawn with the run seed.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .config import RoundConfig
from .data import DomainData, gen_synthetic, load_splits
from .errors import ConfigError
from .model import save_checkpoint
from .numerics import SeededRng
from .selftrain import SelfTrainingResult, run_self_training

log = logging.getLogger(__name__)

BUNDLED_CONFIG = "two_moons.json"
SYNTHETIC_KEYS = {"kind", "n_source", "n_target", "rotation", "translation", "noise", "seed", "n_classes", "dim"}
CSV_KEYS = {"labeled", "unlabeled", "test", "class_count"}


def _plain(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_json(obj, indent: Optional[int] = 2) -> str:
    """Stable JSON text: sorted keys, shortest round-tripping floats."""
    return json.dumps(obj, sort_keys=True, indent=indent, default=_plain, allow_nan=False)


def write_json(obj, path) -> None:
    Path(path).write_text(to_json(obj) + "\n")


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(to_json(rec, indent=None) + "\n")


@dataclass
class ExperimentConfig:
    dataset: dict
    round: RoundConfig
    output_dir: Path
    seeds: list
    base_dir: Path = field(default_factory=Path.cwd)

    def __post_init__(self):
        sources = [k for k in ("synthetic", "csv") if k in self.dataset]
        if len(sources) != 1 or len(self.dataset) != 1:
            raise ConfigError("dataset needs exactly one of 'synthetic' or 'csv'")
        spec = self.dataset[sources[0]]
        allowed = SYNTHETIC_KEYS if sources[0] == "synthetic" else CSV_KEYS
        unknown = sorted(set(spec) - allowed)
        if unknown:
            raise ConfigError(f"unknown {sources[0]} dataset keys: {unknown}")
        if sources[0] == "csv" and not {"labeled", "unlabeled"} <= set(spec):
            raise ConfigError("csv dataset needs 'labeled' and 'unlabeled' paths")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if any(not isinstance(s, int) or isinstance(s, bool) or s < 0 for s in self.seeds):
            raise ConfigError(f"seeds must be non-negative integers, got {self.seeds}")
        self.output_dir = Path(self.output_dir)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        unknown = sorted(set(doc) - {"dataset", "round", "output_dir", "seeds"})
        if unknown:
            raise ConfigError(f"unknown experiment keys: {unknown}")
        if "dataset" not in doc:
            raise ConfigError("experiment config needs a 'dataset' entry")
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        return cls(
            dict(doc["dataset"]),
            RoundConfig.from_dict(doc.get("round", {})),
            base / doc.get("output_dir", "runs"),
            list(doc.get("seeds", [0])),
            base,
        )

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "round": self.round.to_dict(),
            "output_dir": str(self.output_dir),
            "seeds": list(self.seeds),
        }

    def with_overrides(self, selection=None, seed=None, rounds=None, output_dir=None) -> "ExperimentConfig":
        changes = {}
        if selection is not None:
            changes["selection"] = selection
        if rounds is not None:
            changes["rounds"] = rounds
        try:
            cfg = self.round.replace(**changes)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return ExperimentConfig(
            self.dataset,
            cfg,
            Path(output_dir) if output_dir is not None else self.output_dir,
            [seed] if seed is not None else list(self.seeds),
            self.base_dir,
        )


def load_experiment(path=None) -> ExperimentConfig:
    """Read an experiment file; ``None`` loads the bundled two-moons experiment."""
    if path is None:
        text = resources.files("uast.configs").joinpath(BUNDLED_CONFIG).read_text()
        base = Path(".")
    else:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        base = path.parent
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return ExperimentConfig.from_dict(doc, base)


def build_data(exp: ExperimentConfig, seed: int) -> DomainData:
    if "synthetic" in exp.dataset:
        spec = dict(exp.dataset["synthetic"])
        spec.setdefault("seed", seed)
        return DomainData(*gen_synthetic(**spec))
    spec = exp.dataset["csv"]
    paths = [None if spec.get(k) is None else exp.base_dir / spec[k] for k in ("labeled", "unlabeled", "test")]
    return load_splits(*paths, class_count=spec.get("class_count"))


def write_artifacts(result: SelfTrainingResult, out: Path) -> None:
    """Metrics, per-round dumps, bases and the final checkpoint for one seed."""
    write_json(result.metrics, out / "metrics.json")
    if result.stage1_basis is not None:
        write_json(result.stage1_basis.to_dict(), out / "basis_stage1.json")
    for r, rnd in enumerate(result.rounds, start=1):
        write_jsonl([pl.to_dict() for pl in sorted(rnd.pseudo_labels, key=lambda p: p.index)],
                    out / f"pseudo_labels_round{r}.jsonl")
        write_jsonl(rnd.selection.dump_records(), out / f"selection_round{r}.jsonl")
        if rnd.basis is not None:
            write_json(rnd.basis.to_dict(), out / f"basis_round{r}.json")
    save_checkpoint(result.model, out / "checkpoint.uast")


def run_seed(exp: ExperimentConfig, seed: int) -> dict:
    """Run one seed end to end and write its artifacts under ``output_dir/seed_<seed>``."""
    out = exp.output_dir / f"seed_{seed}"
    out.mkdir(parents=True, exist_ok=True)
    cfg = exp.round.replace(seed=seed)
    data = build_data(exp, seed)
    resolved = exp.to_dict()
    resolved["round"] = cfg.to_dict()
    resolved["seeds"] = [seed]
    write_json(resolved, out / "config.json")

    result = run_self_training(data, cfg, SeededRng(seed))
    write_artifacts(result, out)
    final = result.metrics[-1]
    log.info("seed %d done: target accuracy %s", seed, final["target_accuracy"])
    return {"seed": seed, "target_accuracy": final["target_accuracy"],
            "source_accuracy": final["source_accuracy"], "dir": str(out)}


def run_experiment(exp: ExperimentConfig, parallel: bool = False) -> dict:
    """All seeds, sequentially or in worker processes; returns the summary written to summary.json."""
    exp.output_dir.mkdir(parents=True, exist_ok=True)
    if parallel and len(exp.seeds) > 1:
        workers = min(len(exp.seeds), os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run_seed, [exp] * len(exp.seeds), exp.seeds))
    else:
        runs = [run_seed(exp, s) for s in exp.seeds]
    accs = [r["target_accuracy"] for r in runs if r["target_accuracy"] is not None]
    summary = {
        "selection": exp.round.selection,
        "runs": runs,
        "mean_target_accuracy": float(np.mean(accs)) if accs else None,
    }
    write_json(summary, exp.output_dir / "summary.json")
    return summary
