"""White-box and black-box adversarial example generation under lp constraints.

All attacks operate on numpy image batches in [0,1] and return batches that
stay inside both the epsilon ball around the input and the pixel range.  The
subject only needs a differentiable ``forward(Tensor) -> Tensor`` producing
logits, so single models and the gated ensemble are attacked identically.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import InvalidParams, NonFiniteGradient
from .hashing import derive_seed

L2 = "l2"
LINF = "linf"


@dataclass(frozen=True)
class AttackSpec:
    """Declarative lp threat: ball radius, iteration budget, step size, RNG."""

    norm: str
    epsilon: float
    steps: int = 20
    step_size: float | None = None  # None: epsilon/5 for l2, 0.01 for linf
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.norm not in (L2, LINF):
            raise InvalidParams(f"unknown norm {self.norm!r}")
        if self.epsilon <= 0:
            raise InvalidParams("epsilon must be > 0")
        if self.steps < 1:
            raise InvalidParams("steps must be >= 1")
        if self.step_size is None:
            default = self.epsilon / 5.0 if self.norm == L2 else 0.01
            object.__setattr__(self, "step_size", default)
        if self.step_size <= 0:
            raise InvalidParams("step_size must be > 0")

    def with_seed(self, seed: int) -> "AttackSpec":
        return replace(self, seed=seed)


def project(delta: np.ndarray, norm: str, epsilon: float) -> np.ndarray:
    """Project perturbations into the epsilon ball, per example.

    linf clamps coordinates; l2 rescales only when the norm exceeds epsilon,
    so the projection is idempotent and never grows a perturbation.
    """
    if epsilon <= 0:
        raise InvalidParams("epsilon must be > 0")
    delta = np.asarray(delta, dtype=np.float32)
    if norm == LINF:
        return np.clip(delta, -np.float32(epsilon), np.float32(epsilon))
    if norm == L2:
        flat = delta.reshape(delta.shape[0], -1) if delta.ndim > 1 else delta.reshape(1, -1)
        norms = np.linalg.norm(flat, axis=1)
        factor = np.ones_like(norms, dtype=np.float32)
        # the relative slack absorbs f32 rounding so re-projection is a no-op
        over = norms > epsilon * (1 + 1e-6)
        factor[over] = np.float32(epsilon) / norms[over].astype(np.float32)
        out = flat * factor[:, None]
        return out.reshape(delta.shape).astype(np.float32)
    raise InvalidParams(f"unknown norm {norm!r}")


def _sign(g: np.ndarray) -> np.ndarray:
    # sign(0) := 0 keeps degenerate gradients from moving the iterate
    return np.sign(g).astype(np.float32)


def _l2_direction(g: np.ndarray) -> np.ndarray:
    flat = g.reshape(g.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0, norms, 1.0).astype(np.float32)
    out = flat / safe[:, None]
    out[norms == 0] = 0.0
    return out.reshape(g.shape).astype(np.float32)


def _step_direction(g: np.ndarray, norm: str) -> np.ndarray:
    return _sign(g) if norm == LINF else _l2_direction(g)


def input_gradient(subject, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean cross-entropy and its gradient with respect to the input."""
    xt = T.Tensor(x, requires_grad=True)
    loss = T.cross_entropy(subject.forward(xt), y)
    (g,) = T.backward(loss, wrt=[xt])
    if not np.isfinite(g).all():
        raise NonFiniteGradient("input gradient contains NaN/Inf")
    return loss.item(), g


def ce_per_example(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-example cross entropy, stable log-sum-exp form."""
    z = np.asarray(logits, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    return lse - z[np.arange(z.shape[0]), y]


def _random_start(rng: np.random.Generator, shape: tuple, norm: str, epsilon: float) -> np.ndarray:
    if norm == LINF:
        return rng.uniform(-epsilon, epsilon, size=shape).astype(np.float32)
    b = shape[0]
    d = int(np.prod(shape[1:]))
    direction = rng.standard_normal((b, d))
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    radius = epsilon * rng.uniform(0.0, 1.0, size=(b, 1)) ** (1.0 / d)
    return (direction * radius).reshape(shape).astype(np.float32)


def fgsm(subject, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """Single-step sign-gradient attack: clamp(x + eps * sign(grad), 0, 1)."""
    x = np.asarray(x, dtype=np.float32)
    _, g = input_gradient(subject, x, y)
    return np.clip(x + np.float32(epsilon) * _sign(g), 0.0, 1.0)


def pgd(subject, x: np.ndarray, y: np.ndarray, spec: AttackSpec, seed: int | None = None) -> np.ndarray:
    """Projected gradient descent within the spec's ball.

    Each iteration evaluates the gradient at the pixel-clamped iterate, takes
    a steepest-ascent step, projects back into the ball, and re-folds the
    perturbation into the pixel box; the fold is skipped on the final step so
    one-step linf PGD without random start is bit-identical to fgsm.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    eps = np.float32(spec.epsilon)
    alpha = np.float32(spec.step_size)
    if spec.random_start:
        rng = np.random.default_rng(np.random.PCG64(seed if seed is not None else spec.seed))
        delta = _random_start(rng, x.shape, spec.norm, spec.epsilon)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    else:
        delta = np.zeros_like(x)
    for step in range(spec.steps):
        x_eval = np.clip(x + delta, 0.0, 1.0)
        _, g = input_gradient(subject, x_eval, y)
        delta = project(delta + alpha * _step_direction(g, spec.norm), spec.norm, spec.epsilon)
        if step < spec.steps - 1:
            delta = np.clip(x + delta, 0.0, 1.0) - x
    return np.clip(x + delta, 0.0, 1.0)


def msd_perturb(
    subject,
    x: np.ndarray,
    y: np.ndarray,
    specs: list[AttackSpec],
    seed: int | None = None,
) -> np.ndarray:
    """Multi steepest descent: one trajectory, worst-case step across norms.

    At every iteration each spec proposes its own projected step from the
    shared perturbation; the candidate with the largest post-step loss wins,
    decided per example.
    """
    if not specs:
        raise InvalidParams("msd_perturb needs at least one spec")
    steps = specs[0].steps
    if any(s.steps != steps for s in specs):
        raise InvalidParams("msd_perturb specs must share the step count")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    lead = specs[0]
    if lead.random_start:
        rng = np.random.default_rng(np.random.PCG64(seed if seed is not None else lead.seed))
        delta = _random_start(rng, x.shape, lead.norm, lead.epsilon)
        delta = np.clip(x + delta, 0.0, 1.0) - x
    else:
        delta = np.zeros_like(x)
    for step in range(steps):
        x_eval = np.clip(x + delta, 0.0, 1.0)
        _, g = input_gradient(subject, x_eval, y)
        candidates = []
        losses = []
        for spec in specs:
            cand = project(
                delta + np.float32(spec.step_size) * _step_direction(g, spec.norm),
                spec.norm,
                spec.epsilon,
            )
            logits = subject.forward(T.Tensor(np.clip(x + cand, 0.0, 1.0))).data
            candidates.append(cand)
            losses.append(ce_per_example(logits, y))
        pick = np.stack(losses).argmax(axis=0)  # first max wins ties
        stacked = np.stack(candidates)
        delta = stacked[pick, np.arange(x.shape[0])]
        if step < steps - 1:
            delta = np.clip(x + delta, 0.0, 1.0) - x
    return np.clip(x + delta, 0.0, 1.0)


def _square_side(q: int, queries: int, h: int, w: int) -> int:
    # shrink proposal squares as the budget is spent, down to single pixels
    frac = max(0.0, 1.0 - q / max(queries - 1, 1))
    area = (0.4 * frac) ** 2 * h * w
    return max(1, min(int(round(np.sqrt(area))), min(h, w)))


def random_search_attack(
    subject,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    queries: int = 500,
) -> np.ndarray:
    """Gradient-free attack: seeded square proposals, keep the best loss seen.

    The clean input is the first candidate, so the returned example never has
    lower loss than x itself.  Per-item RNG streams derive from
    (spec.seed, item index), making items independent of batch composition.
    """
    if queries < 1:
        raise InvalidParams("queries must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y, dtype=np.int64)
    b, c, h, w = x.shape
    rngs = [np.random.default_rng(np.random.PCG64(derive_seed(spec.seed, i))) for i in range(b)]

    best_delta = np.zeros_like(x)
    best_loss = ce_per_example(subject.forward(T.Tensor(x)).data, y)
    eps = np.float32(spec.epsilon)

    for q in range(1, queries):
        side = _square_side(q, queries, h, w)
        cand = best_delta.copy()
        for i in range(b):
            rng = rngs[i]
            r0 = int(rng.integers(0, h - side + 1))
            c0 = int(rng.integers(0, w - side + 1))
            if spec.norm == LINF:
                patch = eps * rng.choice([-1.0, 1.0], size=(c, 1, 1)).astype(np.float32)
                cand[i, :, r0 : r0 + side, c0 : c0 + side] = patch
            else:
                bump = rng.standard_normal((c, side, side)).astype(np.float32)
                cand[i, :, r0 : r0 + side, c0 : c0 + side] += bump * (eps / np.sqrt(side * side * c))
        cand = project(cand, spec.norm, spec.epsilon)
        cand = np.clip(x + cand, 0.0, 1.0) - x
        losses = ce_per_example(subject.forward(T.Tensor(np.clip(x + cand, 0.0, 1.0))).data, y)
        improved = losses > best_loss
        best_delta[improved] = cand[improved]
        best_loss[improved] = losses[improved]

    return np.clip(x + best_delta, 0.0, 1.0)
