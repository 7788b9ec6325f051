"""Config-driven experiment orchestration.

A TOML config declares the dataset, threat definitions, expert/baseline
training sections, the mixture, and the evaluation matrix.  Stages run in
order (experts -> baselines -> assemble+finetune -> eval), each skippable
when its checkpoint already exists with a matching fingerprint.
"""

from __future__ import annotations

import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # py3.10
    import tomli as tomllib

from . import data as D
from . import ensemble as E
from . import evaluation as ev
from . import nn
from . import training as tr
from .attacks import AttackSpec
from .errors import ConfigParse, MoreLabError, StageFailure
from .hashing import content_hash64
from .weather import FOG, SNOW, PerturbSpec

# Named presets: the reference hyperparameters at full scale plus the
# desk-scale values actually used by the bundled configs.
PRESETS: dict[str, dict] = {
    "cifar-l2-05": {"type": "attack", "norm": "l2", "epsilon": 0.5, "steps": 20},
    "cifar-l2-10": {"type": "attack", "norm": "l2", "epsilon": 1.0, "steps": 20},
    "cifar-linf-6": {"type": "attack", "norm": "linf", "epsilon": 6 / 255, "steps": 20, "step_size": 0.01},
    "cifar-linf-8": {"type": "attack", "norm": "linf", "epsilon": 8 / 255, "steps": 20, "step_size": 0.01},
    "desk-l2": {"type": "attack", "norm": "l2", "epsilon": 2.0, "steps": 20},
    "desk-linf": {"type": "attack", "norm": "linf", "epsilon": 0.2, "steps": 20, "step_size": 0.04},
    "fog1": {"type": "weather", "kind": FOG, "t": 0.15, "light": 0.6},
    "fog2": {"type": "weather", "kind": FOG, "t": 0.12, "light": 0.8},
    "snow1": {"type": "weather", "kind": SNOW, "darkness": 2.5},
    "snow2": {"type": "weather", "kind": SNOW, "darkness": 2.0},
}

DEFAULT_TRAIN = {
    "epochs": 3,
    "batch_size": 128,
    "lr": 0.1,
    "lr_decay": 0.05,
    "momentum": 0.9,
    "seed": 0,
    "attack_ramp_steps": 0,
}


def load_config(path) -> dict:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigParse(f"config not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigParse(f"invalid TOML in {path}: {exc}") from exc


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply `a.b.c=value` overrides; values parse as TOML literals."""
    for item in overrides:
        if "=" not in item:
            raise ConfigParse(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = cfg
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigParse(f"override path {key!r} crosses a non-table value")
        node[parts[-1]] = value
    return cfg


def build_threats(cfg: dict) -> dict[str, tr.Threat]:
    """Materialize the [threats] table, expanding presets first."""
    threats: dict[str, tr.Threat] = {}
    for name, section in cfg.get("threats", {}).items():
        if not isinstance(section, dict):
            raise ConfigParse(f"[threats.{name}] must be a table")
        merged: dict = {}
        if "preset" in section:
            preset = section["preset"]
            if preset not in PRESETS:
                raise ConfigParse(f"unknown preset {preset!r} in [threats.{name}]")
            merged.update(PRESETS[preset])
        merged.update({k: v for k, v in section.items() if k not in ("preset", "queries", "transfer_from")})
        ttype = merged.pop("type", "attack" if "norm" in merged else "weather")
        try:
            if ttype in ("attack", "random_search"):
                threats[name] = AttackSpec(**merged)
            elif ttype == "weather":
                threats[name] = PerturbSpec(**merged)
            else:
                raise ConfigParse(f"unknown threat type {ttype!r} in [threats.{name}]")
        except (TypeError, MoreLabError) as exc:
            raise ConfigParse(f"bad threat [threats.{name}]: {exc}") from exc
    return threats


def resolve_threat(name: str, threats: dict[str, tr.Threat]) -> tr.Threat:
    if name == tr.CLEAN:
        return tr.CLEAN
    if name not in threats:
        raise ConfigParse(f"unknown threat reference {name!r}")
    return threats[name]


def build_train_config(cfg: dict, section: dict) -> tr.TrainConfig:
    merged = {**DEFAULT_TRAIN, **cfg.get("train", {})}
    merged.update({k: v for k, v in section.items() if k in DEFAULT_TRAIN})
    try:
        return tr.TrainConfig(**merged)
    except (TypeError, MoreLabError) as exc:
        raise ConfigParse(f"bad train config: {exc}") from exc


def load_dataset(cfg: dict) -> tuple[D.Dataset, D.Dataset]:
    section = cfg.get("data", {})
    kind = section.get("dataset", "digits")
    seed = int(section.get("seed", 2024))
    if kind == "digits":
        return D.desk_digits(
            int(section.get("train_size", 6000)), int(section.get("test_size", 1500)), seed=seed
        )
    if kind == "blobs":
        n = int(section.get("train_size", 400))
        n_test = int(section.get("test_size", 200))
        margin = float(section.get("margin", 0.8))
        dim = int(section.get("dim", 2))
        train = D.synth_blobs(n, margin, dim, seed)
        test = D.synth_blobs(n_test, margin, dim, seed + 1)
        return train, test
    if kind == "idx":
        root = D.data_dir() or Path(".")
        paths = [section.get(k) for k in ("train_images", "train_labels", "test_images", "test_labels")]
        if any(p is None for p in paths):
            raise ConfigParse("[data] dataset='idx' needs train/test images+labels paths")
        resolved = [Path(p) if Path(p).is_absolute() else root / p for p in paths]
        return (
            D.load_idx(resolved[0], resolved[1], name="train"),
            D.load_idx(resolved[2], resolved[3], name="test"),
        )
    raise ConfigParse(f"unknown dataset kind {kind!r}")


def build_arch(cfg: dict, ds: D.Dataset, num_classes: int | None = None) -> nn.ArchSpec:
    section = cfg.get("arch", {})
    kind = section.get("kind", "cnn")
    classes = num_classes if num_classes is not None else ds.num_classes
    try:
        if kind == "mlp":
            return nn.ArchSpec("mlp", ds.input_shape, classes, hidden=tuple(section.get("hidden", [256])))
        if kind == "cnn":
            return nn.ArchSpec(
                "cnn", ds.input_shape, classes, conv_channels=tuple(section.get("conv_channels", [8, 16]))
            )
    except MoreLabError as exc:
        raise ConfigParse(f"bad [arch]: {exc}") from exc
    raise ConfigParse(f"unknown arch kind {kind!r}")


def _fingerprint(*parts) -> int:
    payload = json.dumps(parts, sort_keys=True, default=str).encode()
    return content_hash64(payload)


class Experiment:
    """Owns the artifact directory and the staged pipeline for one config."""

    def __init__(self, cfg: dict, out_dir, *, log=print):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.log = log
        self.threats = build_threats(cfg)
        try:
            self.train_ds, self.test_ds = load_dataset(cfg)
        except ConfigParse:
            raise
        except MoreLabError as exc:
            raise ConfigParse(f"bad [data] section: {exc}") from exc
        self.arch = build_arch(cfg, self.train_ds)
        self.experts: dict[str, tr.Expert] = {}
        self.baselines: dict[str, tr.Expert] = {}
        self.more: E.Ensemble | None = None

    # -- caching helpers ----------------------------------------------------

    def _cached_model(self, path: Path, fingerprint: int) -> tuple[nn.Model, dict] | None:
        if not path.exists():
            return None
        try:
            model, meta = D.load_model(path)
        except MoreLabError:
            return None
        if meta.get("stage_fingerprint") != str(fingerprint):
            return None
        return model, meta

    def _expert_fingerprint(self, name: str, section: dict) -> int:
        return _fingerprint(
            "expert",
            name,
            section,
            self.cfg.get("train", {}),
            self.arch.to_json(),
            self.train_ds.fingerprint,
        )

    # -- stages -------------------------------------------------------------

    def stage_experts(self, only: list[str] | None = None) -> dict[str, tr.Expert]:
        sections = self.cfg.get("experts", {})
        if only is not None:
            sections = {n: s for n, s in sections.items() if n in only}
        out = self.out / "experts"
        out.mkdir(parents=True, exist_ok=True)
        for name, section in sections.items():
            path = out / f"{name}.ckpt"
            fingerprint = self._expert_fingerprint(name, section)
            cached = self._cached_model(path, fingerprint)
            if cached is not None:
                model, meta = cached
                threat = tr.threat_from_dict(json.loads(meta.get("threat", '"clean"')))
                self.experts[name] = tr.Expert(
                    model,
                    meta.get("provenance", tr.CLEAN),
                    attack=threat if isinstance(threat, AttackSpec) else None,
                    perturb=threat if isinstance(threat, PerturbSpec) else None,
                )
                self.log(f"[experts] {name}: cached")
                continue
            cfg_t = build_train_config(self.cfg, section)
            kind = section.get("kind", "clean")
            if kind == "clean":
                expert = tr.train_clean(self.train_ds, self.arch, cfg_t)
            elif kind == "adv":
                threat = resolve_threat(section["threat"], self.threats)
                if not isinstance(threat, AttackSpec):
                    raise ConfigParse(f"expert {name!r} threat must be an attack")
                expert = tr.train_adversarial(self.train_ds, self.arch, threat, cfg_t)
            elif kind == "weather":
                threat = resolve_threat(section["threat"], self.threats)
                if not isinstance(threat, PerturbSpec):
                    raise ConfigParse(f"expert {name!r} threat must be a weather spec")
                expert = tr.train_weather(self.train_ds, self.arch, threat, cfg_t)
            else:
                raise ConfigParse(f"unknown expert kind {kind!r}")
            D.save_model(
                expert.model,
                path,
                {
                    "provenance": expert.provenance,
                    "threat": json.dumps(tr.threat_to_dict(expert.attack or expert.perturb or tr.CLEAN)),
                    "stage_fingerprint": str(fingerprint),
                    "history": json.dumps(expert.history),
                },
            )
            (out / f"{name}.history.jsonl").write_text(
                "".join(json.dumps(h, sort_keys=True) + "\n" for h in expert.history)
            )
            self.experts[name] = expert
            self.log(f"[experts] {name}: trained ({expert.provenance})")
        return self.experts

    def stage_baselines(self, only: list[str] | None = None) -> dict[str, tr.Expert]:
        sections = self.cfg.get("baselines", {})
        if only is not None:
            sections = {n: s for n, s in sections.items() if n in only}
        out = self.out / "baselines"
        out.mkdir(parents=True, exist_ok=True)
        for name, section in sections.items():
            path = out / f"{name}.ckpt"
            fingerprint = self._expert_fingerprint(name, section)
            cached = self._cached_model(path, fingerprint)
            if cached is not None:
                model, meta = cached
                self.baselines[name] = tr.Expert(model, meta.get("provenance", name))
                self.log(f"[baselines] {name}: cached")
                continue
            cfg_t = build_train_config(self.cfg, section)
            kind = section.get("kind")
            threat_names = section.get("threats", [])
            threat_list = [resolve_threat(t, self.threats) for t in threat_names]
            if kind == "max":
                expert = tr.train_max(self.train_ds, self.arch, threat_list, cfg_t)
            elif kind == "avg":
                expert = tr.train_avg(self.train_ds, self.arch, threat_list, cfg_t)
            elif kind == "msd":
                expert = tr.train_msd(self.train_ds, self.arch, threat_list, cfg_t)
            else:
                raise ConfigParse(f"unknown baseline kind {kind!r}")
            D.save_model(
                expert.model,
                path,
                {"provenance": expert.provenance, "stage_fingerprint": str(fingerprint)},
            )
            (out / f"{name}.history.jsonl").write_text(
                "".join(json.dumps(h, sort_keys=True) + "\n" for h in expert.history)
            )
            self.baselines[name] = expert
            self.log(f"[baselines] {name}: trained ({expert.provenance})")
        return self.baselines

    def stage_more(self, finetune: bool = True) -> E.Ensemble | None:
        section = self.cfg.get("more")
        if not section:
            return None
        expert_names = section.get("experts", list(self.experts.keys()))
        missing = [n for n in expert_names if n not in self.experts]
        if missing:
            raise ConfigParse(f"[more] references untrained experts: {missing}")
        rotation_names = section.get("rotation", [])
        if not rotation_names:
            raise ConfigParse("[more] needs a non-empty rotation")
        rotation = [resolve_threat(n, self.threats) for n in rotation_names]
        fingerprint = _fingerprint(
            "more",
            "finetuned" if finetune else "assembled",
            section,
            self.cfg.get("train", {}),
            [str(self.experts[n].model.fingerprint()) for n in expert_names],
        )
        out = self.out / "more"
        manifest = out / "ensemble.ckpt"
        if manifest.exists():
            try:
                _, meta, _ = D.load_checkpoint(manifest)
                if meta.get("stage_fingerprint") == str(fingerprint):
                    self.more = E.load_ensemble(manifest)
                    self.log("[more] cached")
                    return self.more
            except MoreLabError:
                pass
        gate_arch = build_arch(self.cfg, self.train_ds, num_classes=len(expert_names))
        gate = nn.build_classifier(gate_arch, seed=int(section.get("gate_seed", 7)))
        ens = E.assemble([self.experts[n] for n in expert_names], gate)
        if finetune:
            cfg_t = build_train_config(self.cfg, {**section, "lr": section.get("lr", E.DEFAULT_FINETUNE_LR)})
            E.more_finetune(ens, self.train_ds, rotation, cfg_t)
        E.save_ensemble(ens, out)
        # re-stamp the manifest with the stage fingerprint
        _, meta, _ = D.load_checkpoint(manifest)
        meta["stage_fingerprint"] = str(fingerprint)
        D.save_checkpoint(manifest, {}, meta)
        (out / "finetune.history.jsonl").write_text(
            "".join(json.dumps(h, sort_keys=True) + "\n" for h in ens.history)
        )
        self.more = ens
        self.log("[more] assembled and fine-tuned" if finetune else "[more] assembled")
        return ens

    def stage_eval(self) -> ev.EvalReport:
        section = self.cfg.get("eval", {})
        threat_entries = self._eval_threats(section)
        subjects = self._eval_subjects(section)
        seed = int(section.get("seed", 0))
        batch = int(section.get("batch", 256))
        transfer_sources = {name: expert.model for name, expert in self.experts.items()}
        report = ev.EvalReport()
        for name, subject in subjects.items():
            row = ev.evaluate(
                subject,
                self.test_ds,
                threat_entries,
                seed,
                name=name,
                transfer_sources=transfer_sources,
                batch=batch,
            )
            self.log(f"[eval] {name}: " + ", ".join(f"{t.name}={row.cell(name, t.name):.2f}" for t in threat_entries))
            report.merge(row)
        report.fingerprints["config"] = str(_fingerprint("config", self.cfg))
        self._persist_report(report)
        return report

    def _eval_threats(self, section: dict) -> list[ev.ThreatEntry]:
        entries = []
        for name in section.get("threats", [tr.CLEAN]):
            if name == tr.CLEAN:
                entries.append(ev.ThreatEntry(tr.CLEAN, ev.CLEAN))
                continue
            raw = self.cfg.get("threats", {}).get(name, {})
            threat = resolve_threat(name, self.threats)
            if isinstance(threat, AttackSpec):
                kind = ev.RANDOM_SEARCH if raw.get("type") == "random_search" else ev.PGD
                entries.append(
                    ev.ThreatEntry(
                        name,
                        kind,
                        attack=threat,
                        queries=int(raw.get("queries", 500)),
                        transfer_from=raw.get("transfer_from"),
                    )
                )
            else:
                entries.append(ev.ThreatEntry(name, ev.WEATHER, perturb=threat))
        ev.validate_threats(entries)
        return entries

    def _eval_subjects(self, section: dict) -> dict[str, object]:
        requested = section.get("models")
        subjects: dict[str, object] = {}
        pool: dict[str, object] = {}
        pool.update({n: e.model for n, e in self.experts.items()})
        pool.update({n: e.model for n, e in self.baselines.items()})
        if self.more is not None:
            pool["more"] = self.more
        if requested is None:
            return pool
        for name in requested:
            if name not in pool:
                raise ConfigParse(f"[eval] unknown model {name!r}")
            subjects[name] = pool[name]
        return subjects

    def _persist_report(self, report: ev.EvalReport) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "report.csv").write_text(ev.render_report(report, "csv"))
        (self.out / "report.md").write_text(ev.render_report(report, "markdown"))
        (self.out / "report.json").write_text(report.to_json())
        (self.out / "verdicts.jsonl").write_text("".join(line + "\n" for line in report.verdict_lines()))
        timings = {f"{m}|{t}": w for (m, t), w in report.wall_clock.items()}
        (self.out / "timings.json").write_text(json.dumps(timings, sort_keys=True, indent=1))


def run_experiment(config_path, out_dir=None, overrides: list[str] | None = None, log=print) -> ev.EvalReport:
    """Execute all declared stages; raises StageFailure with the stage name."""
    cfg = load_config(config_path)
    if overrides:
        apply_overrides(cfg, overrides)
    if out_dir is None:
        out_dir = cfg.get("run", {}).get("out_dir", Path(config_path).with_suffix("").name + "_artifacts")
        out_dir = Path(config_path).parent / out_dir
    exp = Experiment(cfg, out_dir, log=log)
    for stage_name, stage in (
        ("experts", exp.stage_experts),
        ("baselines", exp.stage_baselines),
        ("more", exp.stage_more),
    ):
        try:
            stage()
        except ConfigParse:
            raise
        except MoreLabError as exc:
            raise StageFailure(stage_name, exc) from exc
    try:
        return exp.stage_eval()
    except ConfigParse:
        raise
    except MoreLabError as exc:
        raise StageFailure("eval", exc) from exc
