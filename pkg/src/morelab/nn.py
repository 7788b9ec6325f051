"""Desk-scale classifier architectures on top of the tensor engine.

Two families: plain MLPs and a small two-stage CNN.  Both end in a single
fully connected layer so the final linear head can be split off and
fine-tuned on its own while the backbone stays frozen.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidArch, ShapeMismatch
from .hashing import content_hash64

KERNEL = 3
PAD = 1
POOL = 2


@dataclass(frozen=True)
class ArchSpec:
    """Declarative architecture: layer widths for MLPs, conv stages for CNNs."""

    kind: str  # "mlp" | "cnn"
    input_shape: tuple[int, int, int]  # (C, H, W)
    num_classes: int
    hidden: tuple[int, ...] = ()  # mlp hidden widths
    conv_channels: tuple[int, ...] = (8, 16)  # cnn stage widths

    def __post_init__(self):
        if self.kind not in ("mlp", "cnn"):
            raise InvalidArch(f"unknown kind {self.kind!r}")
        if self.num_classes < 2:
            raise InvalidArch("num_classes must be >= 2")
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise InvalidArch(f"bad input shape {self.input_shape}")
        if self.kind == "mlp" and any(w < 1 for w in self.hidden):
            raise InvalidArch("zero-width hidden layer")
        if self.kind == "cnn":
            if not self.conv_channels or any(c < 1 for c in self.conv_channels):
                raise InvalidArch("cnn needs at least one conv stage of width >= 1")
            c, h, w = self.input_shape
            for _ in self.conv_channels:
                if h % POOL or w % POOL:
                    raise InvalidArch(f"spatial size {h}x{w} not poolable by {POOL}")
                h, w = h // POOL, w // POOL
        object.__setattr__(self, "hidden", tuple(self.hidden))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    @property
    def input_size(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def head_width(self) -> int:
        """Input width of the final linear layer."""
        if self.kind == "mlp":
            return self.hidden[-1] if self.hidden else self.input_size
        c, h, w = self.input_shape
        for _ in self.conv_channels:
            h, w = h // POOL, w // POOL
        return self.conv_channels[-1] * h * w

    def param_count(self) -> int:
        """Closed-form parameter count; must match the built model exactly."""
        if self.kind == "mlp":
            widths = [self.input_size, *self.hidden, self.num_classes]
            return sum(a * b + b for a, b in zip(widths, widths[1:]))
        total = 0
        cin = self.input_shape[0]
        for cout in self.conv_channels:
            total += cout * cin * KERNEL * KERNEL + cout
            cin = cout
        return total + self.head_width() * self.num_classes + self.num_classes

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "input_shape": list(self.input_shape),
                "num_classes": self.num_classes,
                "hidden": list(self.hidden),
                "conv_channels": list(self.conv_channels),
            },
            sort_keys=True,
        )

    @staticmethod
    def from_json(text: str) -> "ArchSpec":
        d = json.loads(text)
        return ArchSpec(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            hidden=tuple(d["hidden"]),
            conv_channels=tuple(d["conv_channels"]),
        )


def mnist_mlp(num_classes: int = 10, hidden: tuple[int, ...] = (256,)) -> ArchSpec:
    return ArchSpec("mlp", (1, 28, 28), num_classes, hidden=hidden)


def mnist_cnn(num_classes: int = 10) -> ArchSpec:
    return ArchSpec("cnn", (1, 28, 28), num_classes, conv_channels=(8, 16))


@dataclass
class Model:
    """A built classifier: named parameter tensors plus the arch that shaped them."""

    arch: ArchSpec
    params: dict[str, T.Tensor] = field(default_factory=dict)
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def named_params(self) -> list[tuple[str, T.Tensor]]:
        return list(self.params.items())

    def param_list(self) -> list[T.Tensor]:
        return list(self.params.values())

    def split_head(self) -> tuple[list[tuple[str, T.Tensor]], list[tuple[str, T.Tensor]]]:
        """Disjoint (backbone, head) views sharing the underlying tensors."""
        head_names = ("head_w", "head_b")
        backbone = [(n, t) for n, t in self.params.items() if n not in head_names]
        head = [(n, self.params[n]) for n in head_names]
        return backbone, head

    def head_params(self) -> list[T.Tensor]:
        return [self.params["head_w"], self.params["head_b"]]

    def backbone_params(self) -> list[T.Tensor]:
        return [t for n, t in self.params.items() if n not in ("head_w", "head_b")]

    def set_trainable(self, *, backbone: bool, head: bool) -> None:
        for t in self.backbone_params():
            t.requires_grad = backbone
            if not backbone:
                t.grad = None
        for t in self.head_params():
            t.requires_grad = head
            if not head:
                t.grad = None

    def fingerprint(self, which: str = "all") -> int:
        """Content hash of parameter payloads ('all', 'backbone' or 'head')."""
        if which == "backbone":
            items = [(n, t) for n, t in self.params.items() if n not in ("head_w", "head_b")]
        elif which == "head":
            items = [(n, t) for n, t in self.params.items() if n in ("head_w", "head_b")]
        else:
            items = self.named_params()
        chunks = []
        for name, t in items:
            chunks.append(name.encode())
            chunks.append(np.ascontiguousarray(t.data).tobytes())
        return content_hash64(*chunks)

    def forward(self, x: T.Tensor) -> T.Tensor:
        """Raw logits; the graph is recorded whenever x or a parameter needs grads."""
        if x.data.ndim != 4:
            raise ShapeMismatch(f"expected batch [B,C,H,W], got {x.shape}")
        if tuple(x.shape[1:]) != self.arch.input_shape:
            raise ShapeMismatch(
                f"input {tuple(x.shape[1:])} does not match arch {self.arch.input_shape}"
            )
        b = x.shape[0]
        if self.arch.kind == "mlp":
            h = T.reshape(x, (b, self.arch.input_size))
            for i in range(len(self.arch.hidden)):
                h = T.relu(T.add_bias(T.matmul(h, self.params[f"w{i}"]), self.params[f"b{i}"]))
        else:
            h = x
            for i in range(len(self.arch.conv_channels)):
                h = T.conv2d(h, self.params[f"conv{i}_k"], stride=1, pad=PAD)
                h = T.relu(T.add_channel_bias(h, self.params[f"conv{i}_b"]))
                h = T.max_pool2d(h, POOL)
            h = T.reshape(h, (b, self.arch.head_width()))
        return T.add_bias(T.matmul(h, self.params["head_w"]), self.params["head_b"])

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Class labels for a raw [B,C,H,W] array; ties go to the lowest index."""
        logits = self.forward(T.Tensor(x)).data
        return logits.argmax(axis=1)


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_classifier(arch: ArchSpec, seed: int) -> Model:
    """Deterministically initialized model: Kaiming-uniform weights, zero biases."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    params: dict[str, T.Tensor] = {}
    if arch.kind == "mlp":
        widths = [arch.input_size, *arch.hidden]
        for i in range(len(arch.hidden)):
            params[f"w{i}"] = T.Tensor(
                _kaiming_uniform(rng, widths[i], (widths[i], widths[i + 1])), requires_grad=True
            )
            params[f"b{i}"] = T.Tensor(np.zeros(widths[i + 1], dtype=np.float32), requires_grad=True)
    else:
        cin = arch.input_shape[0]
        for i, cout in enumerate(arch.conv_channels):
            fan_in = cin * KERNEL * KERNEL
            params[f"conv{i}_k"] = T.Tensor(
                _kaiming_uniform(rng, fan_in, (cout, cin, KERNEL, KERNEL)), requires_grad=True
            )
            params[f"conv{i}_b"] = T.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
            cin = cout
    hw = arch.head_width()
    params["head_w"] = T.Tensor(_kaiming_uniform(rng, hw, (hw, arch.num_classes)), requires_grad=True)
    params["head_b"] = T.Tensor(np.zeros(arch.num_classes, dtype=np.float32), requires_grad=True)
    return Model(arch=arch, params=params, seed=seed)
