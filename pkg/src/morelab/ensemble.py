"""The gated mixture of robust experts and its whole-model fine-tuning.

The ensemble output is the gate-softmax-weighted sum of expert logits,
differentiable end to end so attacks and the fine-tuning loop see one model
with no gradient masking.  Fine-tuning updates only the gate and each
expert's final linear layer; backbones are frozen at assembly time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import load_model, save_checkpoint, load_checkpoint, save_model
from .errors import EmptyDataset, EmptyRotation, ShapeMismatch
from .hashing import derive_seed
from .nn import Model
from .training import (
    CLEAN,
    Expert,
    Threat,
    TrainConfig,
    _threat_batch,
    epoch_lr,
    ramp_fraction,
    threat_name,
    threat_to_dict,
    threat_from_dict,
)

DEFAULT_FINETUNE_LR = 0.01


@dataclass
class Ensemble:
    """m frozen-backbone experts plus a trainable gate of output width m."""

    experts: list[Expert]
    gate: Model
    history: list[dict] = field(default_factory=list)
    backbone_fingerprints: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.experts:
            raise ShapeMismatch("ensemble needs at least one expert")
        k = self.experts[0].num_classes
        shape = self.experts[0].model.arch.input_shape
        for e in self.experts:
            if e.num_classes != k or e.model.arch.input_shape != shape:
                raise ShapeMismatch("experts disagree on class count or input shape")
        if self.gate.num_classes != len(self.experts):
            raise ShapeMismatch(
                f"gate width {self.gate.num_classes} != {len(self.experts)} experts"
            )
        if self.gate.arch.input_shape != shape:
            raise ShapeMismatch("gate input shape differs from experts")

    @property
    def m(self) -> int:
        return len(self.experts)

    @property
    def num_classes(self) -> int:
        return self.experts[0].num_classes

    def trainable_params(self) -> list[T.Tensor]:
        params = self.gate.param_list()
        for e in self.experts:
            params.extend(e.model.head_params())
        return params

    def forward(self, x: T.Tensor) -> T.Tensor:
        return more_forward(self, x)

    def current_backbone_fingerprints(self) -> tuple[int, ...]:
        return tuple(e.model.fingerprint("backbone") for e in self.experts)


def assemble(experts: list[Expert], gate: Model) -> Ensemble:
    """Freeze expert backbones, keep heads and the gate trainable."""
    for e in experts:
        e.model.set_trainable(backbone=False, head=True)
    gate_params = gate.param_list()
    for p in gate_params:
        p.requires_grad = True
    ens = Ensemble(experts=experts, gate=gate)
    ens.backbone_fingerprints = ens.current_backbone_fingerprints()
    return ens


def gate_weights(ens: Ensemble, x: T.Tensor) -> T.Tensor:
    """Softmax of the gate logits: one nonnegative weight row per example."""
    return T.softmax(ens.gate.forward(x))


def more_forward(ens: Ensemble, x: T.Tensor) -> T.Tensor:
    """Weighted sum of expert logits; differentiable through gate and experts."""
    w = gate_weights(ens, x)
    out = None
    for i, expert in enumerate(ens.experts):
        term = T.colmul(expert.model.forward(x), T.take_column(w, i))
        out = term if out is None else T.add(out, term)
    return out


def classify(ens: Ensemble, x: np.ndarray) -> np.ndarray:
    """Mixture prediction; argmax ties break toward the lowest class index."""
    logits = more_forward(ens, T.Tensor(x)).data
    return logits.argmax(axis=1)


def ensemble_accuracy(ens: Ensemble, images: np.ndarray, labels: np.ndarray, batch: int = 256) -> float:
    hits = 0
    for start in range(0, len(labels), batch):
        hits += int((classify(ens, images[start : start + batch]) == labels[start : start + batch]).sum())
    return hits / max(len(labels), 1)


def more_finetune(ens: Ensemble, ds, rotation: list[Threat], cfg: TrainConfig) -> Ensemble:
    """Adversarially fine-tune the gate plus expert heads, backbones frozen.

    Minibatch b draws its inner-maximization input from rotation[b mod len]:
    PGD against the whole ensemble for lp specs, the weather transform for
    fog/snow specs, and the raw batch for the clean slot.
    """
    if not rotation:
        raise EmptyRotation("finetune rotation must be non-empty")
    if len(ds) == 0:
        raise EmptyDataset("cannot fine-tune on an empty dataset")

    params = ens.trainable_params()
    velocities = [np.zeros(p.shape, dtype=np.float32) for p in params]
    shuffle_rng = np.random.default_rng(np.random.PCG64(derive_seed(cfg.seed, 0xF7)))
    step = 0
    for epoch in range(cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        perm = shuffle_rng.permutation(len(ds))
        losses = []
        threats_used = []
        for start in range(0, len(ds), cfg.batch_size):
            idxb = perm[start : start + cfg.batch_size]
            xb, yb = ds.images[idxb], ds.labels[idxb]
            threat = rotation[step % len(rotation)]
            threats_used.append(threat_name(threat))
            x_in = _threat_batch(ens, xb, yb, idxb, threat, step, ramp_fraction(cfg, step))
            loss = T.cross_entropy(more_forward(ens, T.Tensor(x_in)), yb)
            T.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros(p.shape, np.float32) for p in params]
            T.sgd_step(params, grads, lr, cfg.momentum, velocities)
            losses.append(loss.item())
            step += 1
        ens.history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": float(np.mean(losses)),
                "clean_acc": ensemble_accuracy(ens, ds.images, ds.labels),
                "threats": threats_used,
            }
        )
    return ens


def default_rotation(
    linf, l2, fog_spec, snow_spec, include_weather: bool = True, include_clean: bool = True
) -> list[Threat]:
    """The fixed cyclic order used by the full defense."""
    rotation: list[Threat] = [linf, l2]
    if include_weather:
        rotation.extend([fog_spec, snow_spec])
    if include_clean:
        rotation.append(CLEAN)
    return rotation


# ---------------------------------------------------------------------------
# manifest persistence
# ---------------------------------------------------------------------------


def save_ensemble(ens: Ensemble, directory) -> Path:
    """Write expert/gate checkpoints plus a manifest listing them."""
    import json

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    expert_entries = []
    for i, e in enumerate(ens.experts):
        fname = f"expert_{i}.ckpt"
        save_model(
            e.model,
            directory / fname,
            {
                "provenance": e.provenance,
                "threat": json.dumps(threat_to_dict(e.attack or e.perturb or CLEAN)),
                "config_hash": str(e.config_hash),
                "data_hash": str(e.data_hash),
            },
        )
        expert_entries.append({"file": fname, "provenance": e.provenance})
    save_model(ens.gate, directory / "gate.ckpt", {"provenance": "gate"})
    manifest_meta = {
        "kind": "ensemble",
        "m": str(ens.m),
        "experts": json.dumps(expert_entries),
        "gate": "gate.ckpt",
        "backbone_fingerprints": json.dumps([str(f) for f in ens.backbone_fingerprints]),
    }
    path = directory / "ensemble.ckpt"
    save_checkpoint(path, {}, manifest_meta)
    return path


def load_ensemble(manifest_path) -> Ensemble:
    import json

    manifest_path = Path(manifest_path)
    directory = manifest_path.parent
    _, meta, _ = load_checkpoint(manifest_path)
    experts = []
    for entry in json.loads(meta["experts"]):
        model, emeta = load_model(directory / entry["file"])
        threat = threat_from_dict(json.loads(emeta.get("threat", '"clean"')))
        experts.append(
            Expert(
                model,
                emeta.get("provenance", CLEAN),
                attack=threat if not isinstance(threat, str) and hasattr(threat, "norm") else None,
                perturb=threat if not isinstance(threat, str) and hasattr(threat, "kind") else None,
                config_hash=int(emeta.get("config_hash", "0")),
                data_hash=int(emeta.get("data_hash", "0")),
            )
        )
    gate, _ = load_model(directory / meta["gate"])
    ens = assemble(experts, gate)
    stored = tuple(int(f) for f in json.loads(meta["backbone_fingerprints"]))
    if stored and stored != ens.backbone_fingerprints:
        raise ShapeMismatch("backbone fingerprints changed across save/load")
    return ens
