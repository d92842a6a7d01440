"""Small seedable classifiers: construction, inference, training, checkpoints.

Three desk-scale families stand in for the usual zoo: flat MLPs, small
conv nets, and a patch-embedding mixer ("tiny-vit-like", attention-free so
the op set stays small while keeping the CNN-vs-non-CNN contrast).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import (Graph, NonFiniteError, Tensor, as_array, evaluate,
                       trace, v_add, v_mul, v_reduce_sum,
                       v_softmax_cross_entropy, vgrad)

ARCH_KINDS = ("mlp", "small-cnn", "tiny-vit-like")

CHECKPOINT_MAGIC = b"ADVALIGN"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Invalid architecture spec, checkpoint, or training input."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; message carries epoch and batch."""


@dataclass(frozen=True)
class ArchSpec:
    """Architecture description with a closed-form parameter count.

    kind-specific fields: ``hidden`` (mlp layer widths), ``channels``
    (conv channels per 3x3-conv + 2x2-maxpool stage), ``patch``/``embed_dim``
    (mixer patch embedding).
    """

    kind: str
    input_shape: tuple[int, int, int]
    num_classes: int
    hidden: tuple[int, ...] = ()
    channels: tuple[int, ...] = ()
    patch: int = 4
    embed_dim: int = 16

    def __post_init__(self):
        if self.kind not in ARCH_KINDS:
            raise ModelError(f"unknown architecture kind {self.kind!r}")
        h, w, c = self.input_shape
        if h < 1 or w < 1 or c < 1:
            raise ModelError(f"invalid input shape {self.input_shape}")
        if self.num_classes < 2:
            raise ModelError("num_classes must be >= 2")
        if self.kind == "mlp" and any(n < 1 for n in self.hidden):
            raise ModelError("mlp hidden widths must be positive")
        if self.kind == "small-cnn":
            if not self.channels or any(n < 1 for n in self.channels):
                raise ModelError("small-cnn needs at least one positive channel count")
            side_h, side_w = h, w
            for _ in self.channels:
                if side_h % 2 or side_w % 2:
                    raise ModelError(
                        f"input {h}x{w} cannot be pooled {len(self.channels)} times")
                side_h //= 2
                side_w //= 2
        if self.kind == "tiny-vit-like":
            if self.patch < 1 or h % self.patch or w % self.patch:
                raise ModelError(f"patch {self.patch} must divide input {h}x{w}")
            if self.embed_dim < 1:
                raise ModelError("embed_dim must be positive")

    @property
    def family(self) -> str:
        return {"mlp": "mlp", "small-cnn": "cnn", "tiny-vit-like": "vit-like"}[self.kind]

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in declared (checkpoint) order."""
        h, w, c = self.input_shape
        shapes: list[tuple[str, tuple[int, ...]]] = []
        if self.kind == "mlp":
            dims = [h * w * c, *self.hidden, self.num_classes]
            for i in range(len(dims) - 1):
                shapes.append((f"layer{i}/w", (dims[i], dims[i + 1])))
                shapes.append((f"layer{i}/b", (dims[i + 1],)))
        elif self.kind == "small-cnn":
            cin = c
            side_h, side_w = h, w
            for i, cout in enumerate(self.channels):
                shapes.append((f"conv{i}/k", (3, 3, cin, cout)))
                shapes.append((f"conv{i}/b", (cout,)))
                cin = cout
                side_h //= 2
                side_w //= 2
            shapes.append(("head/w", (side_h * side_w * cin, self.num_classes)))
            shapes.append(("head/b", (self.num_classes,)))
        else:
            tokens = (h // self.patch) * (w // self.patch)
            d = self.embed_dim
            shapes.append(("embed/w", (self.patch * self.patch * c, d)))
            shapes.append(("embed/b", (d,)))
            shapes.append(("mix/tokens", (tokens, tokens)))
            shapes.append(("mix/channels", (d, d)))
            shapes.append(("head/w", (d, self.num_classes)))
            shapes.append(("head/b", (self.num_classes,)))
        return shapes

    def parameter_count(self) -> int:
        return sum(int(np.prod(s, dtype=np.int64)) for _, s in self.layer_shapes())

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "channels": list(self.channels),
            "patch": self.patch,
            "embed_dim": self.embed_dim,
        }

    @staticmethod
    def from_json(obj: dict) -> "ArchSpec":
        return ArchSpec(
            kind=obj["kind"],
            input_shape=tuple(obj["input_shape"]),
            num_classes=int(obj["num_classes"]),
            hidden=tuple(obj["hidden"]),
            channels=tuple(obj["channels"]),
            patch=int(obj["patch"]),
            embed_dim=int(obj["embed_dim"]),
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64
    weight_decay: float = 0.0
    label_smoothing: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ModelError("training hyperparameters must be nonnegative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ModelError("label smoothing must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ModelError("epochs and batch size must be >= 1")


@dataclass(frozen=True)
class Model:
    """A classifier: spec, forward graph ending at 'logits', named parameters."""

    arch: ArchSpec
    graph: Graph
    params: dict[str, Tensor]
    tags: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def with_params(self, params: dict[str, Tensor], tag: str | None = None,
                    extra_metadata: dict | None = None) -> "Model":
        tags = self.tags + (tag,) if tag else self.tags
        meta = dict(self.metadata)
        if extra_metadata:
            meta.update(extra_metadata)
        return Model(self.arch, self.graph, params, tags, meta)


def build_forward_graph(arch: ArchSpec, batch: int | None = None) -> Graph:
    """The forward pass as a declarative graph; 'image' in, 'logits' out."""
    h, w, c = arch.input_shape
    g = Graph()
    if batch is None:
        x = g.input("image", (h, w, c))
    else:
        x = g.input("image", (batch, h, w, c))
    for name, shape in arch.layer_shapes():
        g.parameter(name, shape)

    if arch.kind == "mlp":
        flat = (h * w * c,) if batch is None else (batch, h * w * c)
        cur = g.reshape(x, flat)
        n_layers = len(arch.hidden) + 1
        for i in range(n_layers):
            cur = g.add(g.matmul(cur, f"layer{i}/w"), f"layer{i}/b")
            if i < n_layers - 1:
                cur = g.relu(cur)
        g.reshape(cur, g.shape_of(cur), name="logits")
    elif arch.kind == "small-cnn":
        cur = x
        for i in range(len(arch.channels)):
            cur = g.relu(g.add(g.conv2d(cur, f"conv{i}/k"), f"conv{i}/b"))
            cur = g.max_pool(cur, 2)
        size = int(np.prod(g.shape_of(cur)[-3:], dtype=np.int64))
        flat = (size,) if batch is None else (batch, size)
        cur = g.reshape(cur, flat)
        g.add(g.matmul(cur, "head/w"), "head/b", name="logits")
    else:
        p = arch.patch
        tokens_h, tokens_w = h // p, w // p
        tokens = tokens_h * tokens_w
        d = arch.embed_dim
        # Patch extraction via a constant gather matrix keeps the op set small:
        # flat image -> (tokens, patch*patch*c) is one linear map.
        gather = np.zeros((h * w * c, tokens * p * p * c))
        for ti in range(tokens_h):
            for tj in range(tokens_w):
                t = ti * tokens_w + tj
                for pi in range(p):
                    for pj in range(p):
                        for ch in range(c):
                            src = ((ti * p + pi) * w + (tj * p + pj)) * c + ch
                            dst = (t * p * p + pi * p + pj) * c + ch
                            gather[src, dst] = 1.0
        g.constant(gather, name="patchify")
        flat = (h * w * c,) if batch is None else (batch, h * w * c)
        cur = g.matmul(g.reshape(x, flat), "patchify")
        pshape = (tokens, p * p * c) if batch is None else (batch, tokens, p * p * c)
        cur = g.reshape(cur, pshape)
        cur = g.add(g.matmul(cur, "embed/w"), "embed/b")
        mixed = g.relu(g.matmul("mix/tokens", cur))
        mixed = g.relu(g.matmul(mixed, "mix/channels"))
        pooled = g.reduce_mean(mixed, axis=-2)  # mean over tokens
        if batch is None:
            pooled = g.reshape(pooled, (d,))
        g.add(g.matmul(pooled, "head/w"), "head/b", name="logits")
    return g


def build_classifier(arch: ArchSpec, seed: int) -> Model:
    """Deterministic scaled-uniform fan-in initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in arch.layer_shapes():
        if name.endswith("/b"):
            params[name] = Tensor(np.zeros(shape))
        else:
            fan_in = int(np.prod(shape[:-1], dtype=np.int64))
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    graph = build_forward_graph(arch, batch=None)
    metadata = {"init": "uniform-fan-in", "seed": seed}
    return Model(arch, graph, params, tags=(), metadata=metadata)


@dataclass(frozen=True)
class Prediction:
    logits: Tensor
    label: int


def predict(model: Model, image) -> Prediction:
    """Logits plus argmax class; ties break toward the lowest index."""
    arr = as_array(image)
    if arr.shape != model.arch.input_shape:
        raise ModelError(
            f"image shape {arr.shape} does not match arch input "
            f"{model.arch.input_shape}")
    out = evaluate(model.graph, {**model.params, "image": arr})
    logits = out["logits"]
    return Prediction(logits, int(np.argmax(logits.array)))


class _BatchedForward:
    """Caches batched forward graphs per batch size for one architecture."""

    def __init__(self, arch: ArchSpec):
        self.arch = arch
        self._graphs: dict[int, Graph] = {}

    def graph(self, batch: int) -> Graph:
        if batch not in self._graphs:
            self._graphs[batch] = build_forward_graph(self.arch, batch=batch)
        return self._graphs[batch]

    def logits(self, params: dict[str, Tensor], images: np.ndarray) -> np.ndarray:
        g = self.graph(images.shape[0])
        env = trace(g, {**params, "image": images})
        return env["logits"].data


def _stack_dataset(dataset) -> tuple[np.ndarray, np.ndarray]:
    items = list(dataset.items)
    if not items:
        raise ModelError("dataset is empty")
    images = np.stack([as_array(item.image) for item in items])
    labels = np.array([item.label for item in items], dtype=np.float64)
    return images, labels


def predict_batch(model: Model, images: np.ndarray) -> np.ndarray:
    """Argmax labels for a stacked image array (lowest-index tie rule)."""
    fwd = _BatchedForward(model.arch)
    logits = fwd.logits(model.params, as_array(images))
    return np.argmax(logits, axis=1)


def accuracy(model: Model, dataset) -> float:
    """Fraction of items whose argmax prediction equals the label."""
    images, labels = _stack_dataset(dataset)
    fwd = _BatchedForward(model.arch)
    hits = 0
    for start in range(0, images.shape[0], 256):
        chunk = images[start:start + 256]
        logits = fwd.logits(model.params, chunk)
        hits += int((np.argmax(logits, axis=1) == labels[start:start + 256]).sum())
    return hits / images.shape[0]


def sgd_train(model: Model, dataset, cfg: TrainConfig, *,
              loss_fn: Callable | None = None,
              batch_hook: Callable | None = None,
              tag: str = "control") -> Model:
    """Shared SGD+momentum loop behind the three training modes.

    ``loss_fn(fwd, params, images, labels)`` returns (loss Var, params order,
    components dict); the default is smoothed cross-entropy plus weight decay.
    ``batch_hook(params, images, labels)`` may replace the batch images
    (adversarial training plugs in here). Determinism: shuffling, batching,
    and update order all derive from ``cfg.seed``.
    """
    images, labels = _stack_dataset(dataset)
    rng = np.random.default_rng(cfg.seed)
    fwd = _BatchedForward(model.arch)
    names = [name for name, _ in model.arch.layer_shapes()]
    params = {name: model.params[name].array.copy() for name in names}
    velocity = {name: np.zeros_like(params[name]) for name in names}
    if loss_fn is None:
        loss_fn = make_crossentropy_loss(cfg.label_smoothing, cfg.weight_decay)

    history: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(images.shape[0])
        sums = {"cce": 0.0, "alignment": 0.0, "decay": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, images.shape[0], cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch_images = images[idx]
            batch_labels = labels[idx]
            if batch_hook is not None:
                batch_images = batch_hook(params, batch_images, batch_labels)
            try:
                loss, leaves, components = loss_fn(fwd, params, batch_images,
                                                   batch_labels)
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} batch {batches}: {exc}"
                ) from exc
            total = float(loss.data[0])
            if not np.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} batch {batches}")
            grads = vgrad(loss, [leaves[name] for name in names])
            for name, grad in zip(names, grads):
                velocity[name] = cfg.momentum * velocity[name] + grad.data
                params[name] = params[name] - cfg.learning_rate * velocity[name]
            for key in sums:
                sums[key] += components.get(key, 0.0)
            batches += 1
        history.append({"epoch": epoch,
                        **{k: sums[k] / batches for k in sums}})

    trained = {name: Tensor(arr) for name, arr in params.items()}
    return model.with_params(trained, tag=tag,
                             extra_metadata={"loss_trace": history,
                                             "train_config": vars(cfg) | {}})


def make_crossentropy_loss(smoothing: float, weight_decay: float) -> Callable:
    """Loss builder: label-smoothed cross-entropy plus L2 weight decay."""

    def loss_fn(fwd: _BatchedForward, params: dict[str, np.ndarray],
                images: np.ndarray, labels: np.ndarray):
        g = fwd.graph(images.shape[0])
        env = trace(g, {**params, "image": images},
                    requires=set(params))
        loss = v_softmax_cross_entropy(env["logits"], as_leaf(labels), smoothing)
        cce = float(loss.data[0])
        decay = 0.0
        if weight_decay > 0.0:
            sq = None
            for name in sorted(params):
                term = v_reduce_sum(v_mul(env[name], env[name]))
                sq = term if sq is None else v_add(sq, term)
            decay_var = v_mul(sq, as_leaf(np.array([weight_decay])))
            decay = float(decay_var.data[0])
            loss = v_add(loss, decay_var)
        components = {"cce": cce, "alignment": 0.0, "decay": decay,
                      "total": float(loss.data[0])}
        return loss, env, components

    return loss_fn


def as_leaf(values):
    from .autodiff import Var
    return Var(np.asarray(values, dtype=np.float64))


def train_crossentropy(model: Model, dataset, cfg: TrainConfig) -> Model:
    """Plain smoothed cross-entropy + weight-decay training ("control")."""
    return sgd_train(model, dataset, cfg, tag="control")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_model(model: Model, path) -> None:
    """Magic + version + canonical-JSON header, then float64 LE blobs in
    declared parameter order."""
    header = {
        "arch": model.arch.to_json(),
        "tags": list(model.tags),
        "metadata": model.metadata,
        "params": [[name, list(shape)] for name, shape in model.arch.layer_shapes()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, _ in model.arch.layer_shapes():
            fh.write(model.params[name].array.astype("<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"not a model checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        arch = ArchSpec.from_json(header["arch"])
        params: dict[str, Tensor] = {}
        for name, shape in header["params"]:
            shape = tuple(shape)
            count = int(np.prod(shape, dtype=np.int64))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ModelError(f"checkpoint truncated at parameter {name!r}")
            params[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))
    graph = build_forward_graph(arch, batch=None)
    return Model(arch, graph, params, tags=tuple(header["tags"]),
                 metadata=header["metadata"])


__all__ = [
    "ArchSpec", "TrainConfig", "Model", "Prediction", "ModelError",
    "DivergenceError", "build_classifier", "build_forward_graph", "predict",
    "predict_batch", "accuracy", "train_crossentropy", "sgd_train",
    "make_crossentropy_loss", "save_model", "load_model",
    "CHECKPOINT_MAGIC", "CHECKPOINT_VERSION",
]
