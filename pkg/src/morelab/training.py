"""Trainers for the three expert categories and the multi-threat baselines.

Every trainer is a pure function of (data, arch, config, seed): shuffling,
attack random starts, and weather flake patterns all derive from the config
and threat seeds, so reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, ce_per_example, msd_perturb, pgd
from .data import Dataset
from .errors import EmptyDataset, InvalidParams
from .hashing import derive_seed
from .nn import ArchSpec, Model, build_classifier
from .weather import PerturbSpec, weatherize_batch, weatherize_dataset

CLEAN = "clean"
Threat = Union[AttackSpec, PerturbSpec, str]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 0.05  # multiplicative per-epoch decay
    momentum: float = 0.9
    seed: int = 0
    # Linear per-step ramp of attack strength (epsilon and step size) over
    # the first N optimizer steps; 0 trains against the full-strength attack
    # from the first minibatch.  Unnormalized desk CNNs under plain SGD
    # collapse to the uniform-output sink when attacked at full strength
    # from random init, so desk configs opt in to a short ramp.
    attack_ramp_steps: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidParams("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidParams("batch_size must be >= 1")
        if self.lr <= 0:
            raise InvalidParams("lr must be > 0")
        if not 0.0 <= self.lr_decay <= 1.0:
            raise InvalidParams("lr_decay must lie in [0,1]")
        if self.attack_ramp_steps < 0:
            raise InvalidParams("attack_ramp_steps must be >= 0")


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * (1.0 - cfg.lr_decay) ** epoch


def ramp_fraction(cfg: TrainConfig, step: int) -> float:
    if cfg.attack_ramp_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / cfg.attack_ramp_steps)


def scale_attack(spec: AttackSpec, frac: float) -> AttackSpec:
    if frac >= 1.0:
        return spec
    from dataclasses import replace

    return replace(spec, epsilon=spec.epsilon * frac, step_size=spec.step_size * frac)


def scale_perturb(spec: PerturbSpec, frac: float) -> PerturbSpec:
    """Ramp weather intensity: fog thickness and snow density are identity at 0."""
    if frac >= 1.0:
        return spec
    from dataclasses import replace

    return replace(spec, t=spec.t * frac, density=spec.density * frac)


@dataclass
class Expert:
    """A trained model plus its immutable provenance and training fingerprint."""

    model: Model
    provenance: str
    attack: AttackSpec | None = None
    perturb: PerturbSpec | None = None
    config_hash: int = 0
    data_hash: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.model.num_classes

    def forward(self, x: T.Tensor) -> T.Tensor:
        return self.model.forward(x)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, batch: int = 512) -> float:
    """Plain accuracy over a raw array, evaluated in chunks."""
    hits = 0
    for start in range(0, len(labels), batch):
        xb = images[start : start + batch]
        hits += int((model.predict(xb) == labels[start : start + batch]).sum())
    return hits / max(len(labels), 1)


def threat_name(threat: Threat) -> str:
    if threat == CLEAN:
        return CLEAN
    if isinstance(threat, AttackSpec):
        return f"pgd-{threat.norm}(eps={threat.epsilon:g})"
    return f"{threat.kind}"


def threat_to_dict(threat: Threat):
    """JSON-friendly form for manifests and configs."""
    from dataclasses import asdict

    if threat == CLEAN:
        return CLEAN
    if isinstance(threat, AttackSpec):
        return {"type": "attack", **asdict(threat)}
    if isinstance(threat, PerturbSpec):
        return {"type": "weather", **asdict(threat)}
    raise InvalidParams(f"unknown threat {threat!r}")


def threat_from_dict(obj) -> Threat:
    if obj == CLEAN:
        return CLEAN
    obj = dict(obj)
    kind = obj.pop("type", "attack" if "norm" in obj else "weather")
    if kind == "attack":
        return AttackSpec(**obj)
    return PerturbSpec(**obj)


def _threat_batch(
    model,
    xb: np.ndarray,
    yb: np.ndarray,
    idxb: np.ndarray,
    threat: Threat,
    step: int,
    scale: float = 1.0,
) -> np.ndarray:
    """Realize one threat against the current model state for this minibatch."""
    if threat == CLEAN:
        return xb
    if isinstance(threat, AttackSpec):
        return pgd(model, xb, yb, scale_attack(threat, scale), seed=derive_seed(threat.seed, step))
    if isinstance(threat, PerturbSpec):
        return weatherize_batch(xb, scale_perturb(threat, scale), idxb)
    raise InvalidParams(f"unknown threat {threat!r}")


def _train_loop(ds: Dataset, arch: ArchSpec, cfg: TrainConfig, batch_fn) -> tuple[Model, list[dict]]:
    """Shared SGD loop; batch_fn maps (model, xb, yb, idxb, step) -> loss tensor."""
    if len(ds) == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    model = build_classifier(arch, seed=cfg.seed)
    params = model.param_list()
    velocities = [np.zeros(p.shape, dtype=np.float32) for p in params]
    shuffle_rng = np.random.default_rng(np.random.PCG64(derive_seed(cfg.seed, 0x51)))
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        perm = shuffle_rng.permutation(len(ds))
        losses = []
        for start in range(0, len(ds), cfg.batch_size):
            idxb = perm[start : start + cfg.batch_size]
            xb, yb = ds.images[idxb], ds.labels[idxb]
            loss = batch_fn(model, xb, yb, idxb, step)
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros(p.shape, np.float32) for p in params]
            T.sgd_step(params, grads, lr, cfg.momentum, velocities)
            losses.append(loss.item())
            step += 1
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": float(np.mean(losses)),
                "clean_acc": accuracy(model, ds.images, ds.labels),
            }
        )
    return model, history


def train_clean(ds: Dataset, arch: ArchSpec, cfg: TrainConfig) -> Expert:
    def batch_fn(model, xb, yb, idxb, step):
        return T.cross_entropy(model.forward(T.Tensor(xb)), yb)

    model, history = _train_loop(ds, arch, cfg, batch_fn)
    return Expert(model, CLEAN, config_hash=_cfg_hash(cfg), data_hash=ds.fingerprint, history=history)


def train_adversarial(ds: Dataset, arch: ArchSpec, attack: AttackSpec, cfg: TrainConfig) -> Expert:
    """Min-max training: each minibatch is replaced by PGD examples crafted
    against the current parameters before the descent step."""

    def batch_fn(model, xb, yb, idxb, step):
        x_adv = _threat_batch(model, xb, yb, idxb, attack, step, ramp_fraction(cfg, step))
        return T.cross_entropy(model.forward(T.Tensor(x_adv)), yb)

    model, history = _train_loop(ds, arch, cfg, batch_fn)
    return Expert(
        model,
        f"adv:{attack.norm}:eps={attack.epsilon:g}",
        attack=attack,
        config_hash=_cfg_hash(cfg),
        data_hash=ds.fingerprint,
        history=history,
    )


def train_weather(ds: Dataset, arch: ArchSpec, spec: PerturbSpec, cfg: TrainConfig) -> Expert:
    """Clean training on the weatherized dataset."""
    wds = weatherize_dataset(ds, spec)
    expert = train_clean(wds, arch, cfg)
    return Expert(
        expert.model,
        f"weather:{spec.kind}",
        perturb=spec,
        config_hash=_cfg_hash(cfg),
        data_hash=ds.fingerprint,
        history=expert.history,
    )


def train_max(ds: Dataset, arch: ArchSpec, threats: list[Threat], cfg: TrainConfig) -> Expert:
    """Per example, train on the highest-loss candidate among all threats."""
    if not threats:
        raise InvalidParams("train_max needs at least one threat")

    def batch_fn(model, xb, yb, idxb, step):
        frac = ramp_fraction(cfg, step)
        if len(threats) == 1:
            chosen = _threat_batch(model, xb, yb, idxb, threats[0], step, frac)
        else:
            candidates = [_threat_batch(model, xb, yb, idxb, t, step, frac) for t in threats]
            losses = np.stack(
                [ce_per_example(model.forward(T.Tensor(c)).data, yb) for c in candidates]
            )
            pick = losses.argmax(axis=0)
            chosen = np.stack(candidates)[pick, np.arange(len(yb))]
        return T.cross_entropy(model.forward(T.Tensor(chosen)), yb)

    model, history = _train_loop(ds, arch, cfg, batch_fn)
    return Expert(
        model,
        "max(" + "+".join(threat_name(t) for t in threats) + ")",
        config_hash=_cfg_hash(cfg),
        data_hash=ds.fingerprint,
        history=history,
    )


def train_avg(ds: Dataset, arch: ArchSpec, threats: list[Threat], cfg: TrainConfig) -> Expert:
    """One step on the mean of the per-threat adversarial losses."""
    if not threats:
        raise InvalidParams("train_avg needs at least one threat")

    def batch_fn(model, xb, yb, idxb, step):
        frac = ramp_fraction(cfg, step)
        terms = [
            T.cross_entropy(
                model.forward(T.Tensor(_threat_batch(model, xb, yb, idxb, t, step, frac))), yb
            )
            for t in threats
        ]
        if len(terms) == 1:
            return terms[0]
        total = terms[0]
        for term in terms[1:]:
            total = T.add(total, term)
        return T.scale(total, 1.0 / len(terms))

    model, history = _train_loop(ds, arch, cfg, batch_fn)
    return Expert(
        model,
        "avg(" + "+".join(threat_name(t) for t in threats) + ")",
        config_hash=_cfg_hash(cfg),
        data_hash=ds.fingerprint,
        history=history,
    )


def train_msd(ds: Dataset, arch: ArchSpec, attacks: list[AttackSpec], cfg: TrainConfig) -> Expert:
    """Adversarial training with the worst-case-direction trajectory."""
    if not attacks:
        raise InvalidParams("train_msd needs at least one attack")
    if any(not isinstance(a, AttackSpec) for a in attacks):
        raise InvalidParams("train_msd supports lp attacks only")

    def batch_fn(model, xb, yb, idxb, step):
        frac = ramp_fraction(cfg, step)
        scaled = [scale_attack(a, frac) for a in attacks]
        x_adv = msd_perturb(model, xb, yb, scaled, seed=derive_seed(attacks[0].seed, step))
        return T.cross_entropy(model.forward(T.Tensor(x_adv)), yb)

    model, history = _train_loop(ds, arch, cfg, batch_fn)
    return Expert(
        model,
        "msd(" + "+".join(a.norm for a in attacks) + ")",
        config_hash=_cfg_hash(cfg),
        data_hash=ds.fingerprint,
        history=history,
    )


def _cfg_hash(cfg: TrainConfig) -> int:
    return derive_seed(
        cfg.epochs,
        cfg.batch_size,
        int(cfg.lr * 1e9),
        int(cfg.lr_decay * 1e9),
        int(cfg.momentum * 1e9),
        cfg.seed,
        cfg.attack_ramp_steps,
    )
