"""Accuracy-matrix evaluation of models and ensembles against threat lists.

Each report row is one subject, each column one threat: clean accuracy,
white-box PGD (adaptive against the subject itself, or transferred from a
named source), seeded black-box random search, or a weather transform.
Per-example verdicts are kept so every cell is recomputable.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, pgd, random_search_attack
from .data import Dataset
from .errors import GradientUnavailable, InvalidParams
from .hashing import derive_seed
from .weather import PerturbSpec, weatherize_batch

CLEAN = "clean"
PGD = "pgd"
RANDOM_SEARCH = "random_search"
WEATHER = "weather"


@dataclass(frozen=True)
class ThreatEntry:
    """One evaluation column: a named threat with its parameters."""

    name: str
    kind: str
    attack: AttackSpec | None = None
    perturb: PerturbSpec | None = None
    queries: int = 500
    transfer_from: str | None = None  # None: adaptive (generated on the subject)

    def __post_init__(self):
        if self.kind not in (CLEAN, PGD, RANDOM_SEARCH, WEATHER):
            raise InvalidParams(f"unknown threat kind {self.kind!r}")
        if self.kind in (PGD, RANDOM_SEARCH) and self.attack is None:
            raise InvalidParams(f"threat {self.name!r} needs an attack spec")
        if self.kind == WEATHER and self.perturb is None:
            raise InvalidParams(f"threat {self.name!r} needs a perturbation spec")


def validate_threats(threats: list[ThreatEntry]) -> None:
    if not threats:
        raise InvalidParams("threat list must be non-empty")
    names = [t.name for t in threats]
    if len(set(names)) != len(names):
        raise InvalidParams("threat names must be unique")


@dataclass
class EvalReport:
    """Accuracy matrix in percent plus per-example verdicts and timings."""

    models: list[str] = field(default_factory=list)
    threats: list[str] = field(default_factory=list)
    accuracy: dict[tuple[str, str], float] = field(default_factory=dict)
    counts: dict[tuple[str, str], int] = field(default_factory=dict)
    wall_clock: dict[tuple[str, str], float] = field(default_factory=dict)
    fingerprints: dict[str, str] = field(default_factory=dict)
    verdicts: list[dict] = field(default_factory=list)

    def cell(self, model: str, threat: str) -> float:
        return self.accuracy[(model, threat)]

    def row_mean(self, model: str, threats: list[str] | None = None) -> float:
        cols = threats if threats is not None else self.threats
        return float(np.mean([self.accuracy[(model, t)] for t in cols]))

    def merge(self, other: "EvalReport") -> "EvalReport":
        for m in other.models:
            if m in self.models:
                raise InvalidParams(f"duplicate model row {m!r}")
        if self.threats and other.threats and self.threats != other.threats:
            raise InvalidParams("cannot merge reports with different threat lists")
        self.models.extend(other.models)
        self.threats = self.threats or other.threats
        self.accuracy.update(other.accuracy)
        self.counts.update(other.counts)
        self.wall_clock.update(other.wall_clock)
        self.fingerprints.update(other.fingerprints)
        self.verdicts.extend(other.verdicts)
        return self

    def verdict_lines(self):
        for v in self.verdicts:
            yield json.dumps(v, sort_keys=True)

    def to_json(self) -> str:
        # wall-clock stays out: serialized reports must be bit-identical
        # across reruns of the same (config, seed)
        return json.dumps(
            {
                "models": self.models,
                "threats": self.threats,
                "accuracy": {f"{m}|{t}": a for (m, t), a in self.accuracy.items()},
                "counts": {f"{m}|{t}": c for (m, t), c in self.counts.items()},
                "fingerprints": self.fingerprints,
            },
            sort_keys=True,
            indent=1,
        )

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        d = json.loads(text)
        report = EvalReport(models=d["models"], threats=d["threats"])
        for key, acc in d["accuracy"].items():
            m, t = key.split("|", 1)
            report.accuracy[(m, t)] = acc
        for key, c in d.get("counts", {}).items():
            m, t = key.split("|", 1)
            report.counts[(m, t)] = c
        for key, w in d.get("wall_clock", {}).items():
            m, t = key.split("|", 1)
            report.wall_clock[(m, t)] = w
        report.fingerprints = d.get("fingerprints", {})
        return report


def _predict(subject, x: np.ndarray, batch: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(x), batch):
        logits = subject.forward(T.Tensor(x[start : start + batch])).data
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _threat_inputs(
    subject,
    entry: ThreatEntry,
    ds: Dataset,
    seed: int,
    transfer_sources: dict[str, object],
    batch: int,
) -> np.ndarray:
    """Materialize the evaluation inputs for one threat column."""
    if entry.kind == CLEAN:
        return ds.images
    if entry.kind == WEATHER:
        return weatherize_batch(ds.images, entry.perturb, np.arange(len(ds)))
    target = subject
    if entry.transfer_from is not None:
        if entry.transfer_from not in transfer_sources:
            raise InvalidParams(f"unknown transfer source {entry.transfer_from!r}")
        target = transfer_sources[entry.transfer_from]
    if not hasattr(target, "forward"):
        raise GradientUnavailable(f"threat {entry.name!r} target is not differentiable")
    chunks = []
    for start in range(0, len(ds), batch):
        xb = ds.images[start : start + batch]
        yb = ds.labels[start : start + batch]
        spec = entry.attack.with_seed(derive_seed(seed, entry.attack.seed, start))
        if entry.kind == PGD:
            chunks.append(pgd(target, xb, yb, spec))
        else:
            chunks.append(random_search_attack(target, xb, yb, spec, queries=entry.queries))
    return np.concatenate(chunks)


def evaluate(
    subject,
    ds: Dataset,
    threats: list[ThreatEntry],
    seed: int = 0,
    *,
    name: str = "model",
    transfer_sources: dict[str, object] | None = None,
    batch: int = 256,
) -> EvalReport:
    """One report row: the subject's accuracy under every threat."""
    validate_threats(threats)
    transfer_sources = transfer_sources or {}
    report = EvalReport(models=[name], threats=[t.name for t in threats])
    report.fingerprints[f"data:{ds.name}"] = str(ds.fingerprint)
    for entry in threats:
        start_time = time.perf_counter()
        x_eval = _threat_inputs(subject, entry, ds, seed, transfer_sources, batch)
        predicted = _predict(subject, x_eval)
        elapsed = time.perf_counter() - start_time
        correct = predicted == ds.labels
        report.accuracy[(name, entry.name)] = float(correct.mean() * 100.0)
        report.counts[(name, entry.name)] = len(ds)
        report.wall_clock[(name, entry.name)] = elapsed
        for i in range(len(ds)):
            report.verdicts.append(
                {
                    "index": int(i),
                    "model": name,
                    "threat": entry.name,
                    "predicted": int(predicted[i]),
                    "true": int(ds.labels[i]),
                }
            )
    return report


def render_report(report: EvalReport, format: str = "markdown") -> str:
    """Accuracy matrix as csv or a markdown pipe table, cells "%.2f"."""
    if format == "csv":
        lines = ["model," + ",".join(report.threats)]
        for m in report.models:
            cells = ",".join(f"{report.accuracy[(m, t)]:.2f}" for t in report.threats)
            lines.append(f"{m},{cells}")
        return "\n".join(lines) + "\n"
    if format == "markdown":
        header = "| model | " + " | ".join(report.threats) + " |"
        sep = "|" + "---|" * (len(report.threats) + 1)
        lines = [header, sep]
        for m in report.models:
            cells = " | ".join(f"{report.accuracy[(m, t)]:.2f}" for t in report.threats)
            lines.append(f"| {m} | {cells} |")
        return "\n".join(lines) + "\n"
    raise InvalidParams(f"unknown report format {format!r}")


def accuracy_from_verdicts(report: EvalReport, model: str, threat: str) -> float:
    """Recompute a cell from the persisted per-example verdicts."""
    rows = [v for v in report.verdicts if v["model"] == model and v["threat"] == threat]
    if not rows:
        raise InvalidParams(f"no verdicts for ({model!r}, {threat!r})")
    return 100.0 * sum(v["predicted"] == v["true"] for v in rows) / len(rows)
