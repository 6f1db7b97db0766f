"""Embedding functions with hand-written reverse-mode gradients, SGD and checkpoints.

An :class:`Embedder` owns a flat float32 parameter vector plus a layout that
slices it into named tensors. The network graph is rebuilt from ``kind`` and
``arch`` on demand, so an embedder is fully described by
``(kind, arch, params)`` and round-trips through a checkpoint bit-exactly.

Kinds:

* ``identity`` -- no parameters; flattens the input.
* ``linear``   -- flatten, then ``W x + b``.
* ``toy-cnn``  -- blocks of (3x3 conv, ReLU, 2x2 max-pool), global average pool.
* ``table``    -- precomputed embeddings looked up by ``source_id``; never trainable.
"""

from __future__ import annotations

import copy
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from protoshot import binfmt
from protoshot._seeding import make_rng
from protoshot.dataset import LabeledExample
from protoshot.protonet import episode_loss_grad

KINDS = ("identity", "linear", "toy-cnn", "table")
DEFAULT_CNN_WIDTHS = (8, 16, 32, 64)


class EmbedderError(ValueError):
    pass


class FrozenEmbedderError(RuntimeError):
    pass


# --------------------------------------------------------------------------- layers
#
# Each layer maps (params, x) -> (y, cache) and (params, cache, dy) -> (dx, grads).


class Flatten:
    name = "flatten"
    param_shapes: dict = {}

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, cache, dy):
        return dy.reshape(cache), {}


class Dense:
    def __init__(self, name: str, d_in: int, d_out: int, bias: bool = True):
        self.name = name
        self.param_shapes = {f"{name}.weight": (d_out, d_in)}
        if bias:
            self.param_shapes[f"{name}.bias"] = (d_out,)
        self.bias = bias

    def forward(self, p, x):
        y = x @ p[f"{self.name}.weight"].T
        if self.bias:
            y = y + p[f"{self.name}.bias"]
        return y, x

    def backward(self, p, x, dy):
        grads = {f"{self.name}.weight": dy.T @ x}
        if self.bias:
            grads[f"{self.name}.bias"] = dy.sum(axis=0)
        return dy @ p[f"{self.name}.weight"], grads


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    def __init__(self, name: str, c_in: int, c_out: int):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.param_shapes = {f"{name}.weight": (c_out, c_in, 3, 3), f"{name}.bias": (c_out,)}

    def forward(self, p, x):
        b, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # b c h w 3 3
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * 9)
        wmat = p[f"{self.name}.weight"].reshape(self.c_out, -1)
        y = cols @ wmat.T + p[f"{self.name}.bias"]
        return y.reshape(b, h, w, self.c_out).transpose(0, 3, 1, 2), (x.shape, cols)

    def backward(self, p, cache, dy):
        (b, c, h, w), cols = cache
        dy_mat = dy.transpose(0, 2, 3, 1).reshape(b * h * w, self.c_out)
        wmat = p[f"{self.name}.weight"].reshape(self.c_out, -1)
        grads = {
            f"{self.name}.weight": (dy_mat.T @ cols).reshape(self.c_out, c, 3, 3),
            f"{self.name}.bias": dy_mat.sum(axis=0),
        }
        dcols = (dy_mat @ wmat).reshape(b, h, w, c, 3, 3)
        dxp = np.zeros((b, c, h + 2, w + 2), dtype=dy.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + h, j : j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1], grads


class ReLU:
    param_shapes: dict = {}

    def __init__(self, name: str = "relu"):
        self.name = name

    def forward(self, p, x):
        mask = x > 0
        return x * mask, mask

    def backward(self, p, mask, dy):
        return dy * mask, {}


class MaxPool2:
    """2x2 max-pool, stride 2; odd trailing rows/columns are dropped."""

    param_shapes: dict = {}

    def __init__(self, name: str = "pool"):
        self.name = name

    def forward(self, p, x):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        if h2 == 0 or w2 == 0:
            raise EmbedderError(f"{self.name}: input {h}x{w} too small for 2x2 pooling")
        blocks = x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(b, c, h2, w2, 4)
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, p, cache, dy):
        (b, c, h, w), arg = cache
        h2, w2 = dy.shape[2:]
        blocks = np.zeros((b, c, h2, w2, 4), dtype=dy.dtype)
        np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
        dx = np.zeros((b, c, h, w), dtype=dy.dtype)
        dx[:, :, : 2 * h2, : 2 * w2] = (
            blocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * h2, 2 * w2)
        )
        return dx, {}


class GlobalAvgPool:
    param_shapes: dict = {}
    name = "gap"

    def forward(self, p, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, p, shape, dy):
        b, c, h, w = shape
        return np.broadcast_to(dy[:, :, None, None] / (h * w), shape).copy(), {}


def _build_layers(kind: str, arch: Mapping, input_spec: tuple[int, ...]) -> list:
    if kind == "identity":
        return [Flatten()]
    if kind == "linear":
        d_in = int(np.prod(input_spec))
        return [Flatten(), Dense("linear", d_in, int(arch["out_dim"]), bias=bool(arch.get("bias", True)))]
    if kind == "toy-cnn":
        if len(input_spec) != 3:
            raise EmbedderError(f"toy-cnn needs a (C,H,W) input spec, got {input_spec}")
        layers: list = []
        c_in = input_spec[0]
        for k, width in enumerate(arch["widths"]):
            layers += [Conv3x3(f"block{k}.conv", c_in, int(width)), ReLU(f"block{k}.relu"), MaxPool2(f"block{k}.pool")]
            c_in = int(width)
        layers.append(GlobalAvgPool())
        return layers
    raise EmbedderError(f"kind {kind!r} has no layer graph")


# --------------------------------------------------------------------------- embedder


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def _layout(layers) -> tuple[ParamSpec, ...]:
    out, offset = [], 0
    for layer in layers:
        for name, shape in layer.param_shapes.items():
            spec = ParamSpec(name, tuple(shape), offset)
            out.append(spec)
            offset += spec.size
    return tuple(out)


@dataclass
class Embedder:
    kind: str
    input_spec: tuple[int, ...]
    embedding_dim: int
    params: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float32))
    arch: dict = field(default_factory=dict)
    frozen: bool = False
    frozen_groups: frozenset[str] = frozenset()
    table: dict[str, np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise EmbedderError(f"unknown embedder kind {self.kind!r}")
        self.input_spec = tuple(int(v) for v in self.input_spec)
        self.frozen_groups = frozenset(self.frozen_groups)
        if self.kind == "table":
            if not self.table:
                raise EmbedderError("table embedder needs a non-empty table")
            self.frozen = True
            self._layers, self.layout = [], ()
            return
        self._layers = _build_layers(self.kind, self.arch, self.input_spec)
        self.layout = _layout(self._layers)
        total = sum(s.size for s in self.layout)
        if self.params.size == 0 and total:
            raise EmbedderError("parameters missing; use a factory such as linear_embedder()")
        if self.params.size != total:
            raise EmbedderError(f"parameter vector has {self.params.size} entries, layout needs {total}")
        unknown = self.frozen_groups - {s.name for s in self.layout}
        if unknown:
            raise EmbedderError(f"frozen_groups names unknown parameters: {sorted(unknown)}")

    # -- parameter views -------------------------------------------------
    def named(self, params: np.ndarray | None = None) -> dict[str, np.ndarray]:
        flat = self.params if params is None else params
        return {s.name: flat[s.offset : s.offset + s.size].reshape(s.shape) for s in self.layout}

    def trainable_mask(self) -> np.ndarray:
        mask = np.zeros(self.params.size, dtype=bool)
        if self.frozen:
            return mask
        for s in self.layout:
            if s.name not in self.frozen_groups:
                mask[s.offset : s.offset + s.size] = True
        return mask

    @property
    def num_params(self) -> int:
        return int(self.params.size)

    def copy(self) -> Embedder:
        return Embedder(
            self.kind,
            self.input_spec,
            self.embedding_dim,
            self.params.copy(),
            copy.deepcopy(self.arch),
            self.frozen,
            self.frozen_groups,
            self.table,
            copy.deepcopy(self.meta),
        )

    def astype(self, dtype) -> Embedder:
        out = self.copy()
        out.params = out.params.astype(dtype)
        return out

    def freeze_depth(self, n_groups: int) -> Embedder:
        """Freeze the first ``n_groups`` layers that own parameters (weights and biases together)."""
        prefixes: list[str] = []
        for s in self.layout:
            prefix = s.name.rsplit(".", 1)[0]
            if prefix not in prefixes:
                prefixes.append(prefix)
        chosen = set(prefixes[:n_groups])
        self.frozen_groups = frozenset(s.name for s in self.layout if s.name.rsplit(".", 1)[0] in chosen)
        return self

    # -- forward ------------------------------------------------------------
    def _inputs(self, xs) -> np.ndarray:
        if isinstance(xs, np.ndarray):
            arr = xs
        else:
            arr = np.stack([x.data if isinstance(x, LabeledExample) else np.asarray(x) for x in xs])
        if arr.shape[1:] != self.input_spec:
            raise EmbedderError(f"input shape {arr.shape[1:]} does not match input_spec {self.input_spec}")
        return arr.astype(self.params.dtype if self.params.size else np.float32, copy=False)

    def _lookup(self, xs) -> np.ndarray:
        rows = []
        for x in xs:
            sid = x.source_id if isinstance(x, LabeledExample) else x
            if not isinstance(sid, str):
                raise EmbedderError("table embedders take LabeledExample or source_id inputs")
            try:
                rows.append(self.table[sid])
            except KeyError:
                raise EmbedderError(f"unknown source_id: {sid}") from None
        return np.stack(rows)

    def forward(self, xs, params: np.ndarray | None = None) -> tuple[np.ndarray, list]:
        if self.kind == "table":
            return self._lookup(xs), []
        p = self.named(params)
        h = self._inputs(xs)
        if params is not None:
            h = h.astype(params.dtype, copy=False)
        caches = []
        for layer in self._layers:
            h, cache = layer.forward(p, h)
            if not np.all(np.isfinite(h)):
                raise FloatingPointError(f"non-finite output in layer {layer.name}")
            caches.append(cache)
        return h, caches

    def backward(self, caches: list, dz: np.ndarray, params: np.ndarray | None = None) -> np.ndarray:
        p = self.named(params)
        flat = np.zeros(self.params.size, dtype=dz.dtype)
        g = dz
        for layer, cache in zip(reversed(self._layers), reversed(caches)):
            g, grads = layer.backward(p, cache, g)
            for name, val in grads.items():
                spec = next(s for s in self.layout if s.name == name)
                flat[spec.offset : spec.offset + spec.size] = val.ravel()
        return flat

    def embed_batch(self, xs) -> np.ndarray:
        return self.forward(xs)[0]


def embed(e: Embedder, x) -> np.ndarray:
    """Embedding of a single input (array, LabeledExample, or source_id for tables)."""
    return e.embed_batch([x])[0]


# --------------------------------------------------------------------------- factories


def _he_init(rng: np.random.Generator, spec: ParamSpec) -> np.ndarray:
    if spec.name.endswith(".bias"):
        return np.zeros(spec.shape)
    fan_in = int(np.prod(spec.shape[1:]))
    return rng.standard_normal(spec.shape) * math.sqrt(2.0 / fan_in)


def _init_params(e: Embedder, seed: int) -> np.ndarray:
    rng = make_rng(seed, "init", e.kind)
    chunks = [_he_init(rng, s).ravel() for s in e.layout]
    return np.concatenate(chunks).astype(np.float32) if chunks else np.zeros(0, np.float32)


def _build(kind: str, input_spec, dim: int, arch: dict, seed: int | None, params=None) -> Embedder:
    layers = _build_layers(kind, arch, tuple(input_spec))
    total = sum(s.size for s in _layout(layers))
    stub = Embedder(kind, input_spec, dim, np.zeros(total, np.float32), arch)
    if params is None:
        stub.params = _init_params(stub, 0 if seed is None else seed)
    else:
        stub.params = np.asarray(params, dtype=np.float32).ravel().copy()
        if stub.params.size != total:
            raise EmbedderError(f"expected {total} parameters, got {stub.params.size}")
    return stub


def identity_embedder(input_spec: Sequence[int] | int) -> Embedder:
    spec = (input_spec,) if isinstance(input_spec, int) else tuple(input_spec)
    return Embedder("identity", spec, int(np.prod(spec)))


def linear_embedder(
    input_spec: Sequence[int] | int,
    out_dim: int,
    seed: int = 0,
    bias: bool = True,
    weight: np.ndarray | None = None,
    bias_value: np.ndarray | None = None,
) -> Embedder:
    spec = (input_spec,) if isinstance(input_spec, int) else tuple(input_spec)
    arch = {"out_dim": int(out_dim), "bias": bool(bias)}
    if weight is None:
        e = _build("linear", spec, out_dim, arch, seed)
        # variance-preserving init keeps random projections distance-faithful
        e.named()["linear.weight"][...] *= math.sqrt(0.5)
        return e
    w = np.asarray(weight, dtype=np.float32).reshape(out_dim, -1)
    parts = [w.ravel()]
    if bias:
        parts.append(np.zeros(out_dim, np.float32) if bias_value is None else np.asarray(bias_value, np.float32))
    return _build("linear", spec, out_dim, arch, None, np.concatenate(parts))


def toy_cnn(input_spec: Sequence[int], widths: Sequence[int] = DEFAULT_CNN_WIDTHS, seed: int = 0) -> Embedder:
    spec = tuple(input_spec)
    if len(spec) != 3:
        raise EmbedderError("toy_cnn needs a (C, H, W) input spec")
    if min(spec[1:]) < 2 ** len(widths):
        raise EmbedderError(f"input {spec[1]}x{spec[2]} too small for {len(widths)} pooling stages")
    return _build("toy-cnn", spec, int(widths[-1]), {"widths": [int(w) for w in widths]}, seed)


def table_embedder(table: Mapping[str, np.ndarray]) -> Embedder:
    if not table:
        raise EmbedderError("empty embedding table")
    dims = {np.asarray(v).size for v in table.values()}
    if len(dims) != 1:
        raise EmbedderError(f"dimension disagreement in table: {sorted(dims)}")
    (dim,) = dims
    tab = {k: np.asarray(v, dtype=np.float32).ravel() for k, v in table.items()}
    return Embedder("table", (dim,), dim, table=tab, frozen=True)


def make_embedder(kind: str, input_spec, embedding_dim: int | None = None, seed: int = 0, widths=None) -> Embedder:
    if kind == "identity":
        return identity_embedder(input_spec)
    if kind == "linear":
        if embedding_dim is None:
            raise EmbedderError("linear embedder needs embedding_dim")
        return linear_embedder(input_spec, embedding_dim, seed=seed)
    if kind == "toy-cnn":
        return toy_cnn(input_spec, widths or DEFAULT_CNN_WIDTHS, seed=seed)
    raise EmbedderError(f"cannot construct kind {kind!r} from scratch")


# --------------------------------------------------------------------------- heads and loss


@dataclass
class EpisodeHead:
    """Prototypical-network head: the batch is ``support + queries``; targets cover the queries."""

    support_labels: np.ndarray
    n_classes: int
    distance: str = "sqeuclidean"

    @property
    def n_support(self) -> int:
        return len(self.support_labels)


@dataclass
class LinearHead:
    """Conventional classifier over embeddings; owns its own trainable parameters."""

    weight: np.ndarray  # (n_classes, M)
    bias: np.ndarray  # (n_classes,)

    @classmethod
    def init(cls, embedding_dim: int, n_classes: int, seed: int = 0) -> LinearHead:
        rng = make_rng(seed, "linear-head")
        w = rng.standard_normal((n_classes, embedding_dim)) / math.sqrt(embedding_dim)
        return cls(w.astype(np.float32), np.zeros(n_classes, np.float32))

    def logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T.astype(z.dtype) + self.bias.astype(z.dtype)


class GradientTape:
    """Forward record of one loss evaluation; ``backward`` may run once."""

    def __init__(self, loss: float, backward_fn, n_params: int, predictions: np.ndarray):
        self.loss = loss
        self.predictions = predictions
        self._backward_fn = backward_fn
        self._n_params = n_params
        self.grad: np.ndarray | None = None
        self.head_grad: dict[str, np.ndarray] | None = None

    @property
    def used(self) -> bool:
        return self._backward_fn is None

    def backward(self) -> np.ndarray:
        if self._backward_fn is None:
            raise RuntimeError("gradient tape already consumed")
        self.grad, self.head_grad = self._backward_fn()
        self._backward_fn = None
        assert self.grad.size == self._n_params
        return self.grad

    @classmethod
    def from_gradient(cls, grad: np.ndarray, loss: float = float("nan")) -> GradientTape:
        """A tape carrying a precomputed adjoint (useful for custom objectives)."""
        tape = cls(loss, None, grad.size, np.zeros(0))
        tape.grad = np.asarray(grad)
        return tape


def _soft_ce(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    n = logits.shape[0]
    loss = float(-(targets * log_p).sum() / n)
    return loss, p, (p - targets) / n


def forward_loss(
    e: Embedder,
    batch,
    targets: np.ndarray,
    head: EpisodeHead | LinearHead,
    params: np.ndarray | None = None,
) -> tuple[float, GradientTape]:
    """Mean cross-entropy of the head's predictive distribution against soft ``targets``."""
    if len(batch) == 0:
        raise EmbedderError("empty batch")
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim != 2 or not np.allclose(t.sum(axis=1), 1.0, atol=1e-6) or np.any(t < 0):
        raise EmbedderError("targets must be a row-normalized non-negative matrix")
    z, caches = e.forward(batch, params)
    n_params = e.params.size

    if isinstance(head, EpisodeHead):
        ns = head.n_support
        if t.shape != (len(batch) - ns, head.n_classes):
            raise EmbedderError(f"episode targets must be ({len(batch) - ns}, {head.n_classes}), got {t.shape}")
        loss, probs, g_s, g_q = episode_loss_grad(z[:ns], head.support_labels, z[ns:], t, head.distance)

        def backward_fn():
            dz = np.concatenate([g_s, g_q]).astype(z.dtype)
            return e.backward(caches, dz, params), None

    elif isinstance(head, LinearHead):
        if t.shape != (len(batch), head.weight.shape[0]):
            raise EmbedderError(f"targets must be ({len(batch)}, {head.weight.shape[0]}), got {t.shape}")
        logits = head.logits(z)
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite output in layer linear-head")
        loss, probs, g_logits = _soft_ce(logits, t)

        def backward_fn():
            g = g_logits.astype(z.dtype)
            head_grad = {"weight": g.T @ z, "bias": g.sum(axis=0)}
            dz = g @ head.weight.astype(z.dtype)
            return e.backward(caches, dz, params), head_grad

    else:
        raise EmbedderError(f"unsupported head {type(head).__name__}")

    if not math.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, GradientTape(loss, backward_fn, n_params, probs)


# --------------------------------------------------------------------------- optimisation


def sgd_step(
    e: Embedder,
    tape: GradientTape,
    lr: float,
    momentum: float = 0.0,
    velocity: np.ndarray | None = None,
) -> Embedder:
    """In-place SGD update ``phi -= lr * v`` with ``v = momentum * v + grad``; returns ``e``.

    ``velocity`` (same length as ``phi``) carries momentum between calls and is
    updated in place. Frozen parameter groups are left untouched.
    """
    if e.frozen:
        raise FrozenEmbedderError(f"cannot update frozen {e.kind} embedder")
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    grad = tape.grad if tape.grad is not None else tape.backward()
    if not np.all(np.isfinite(grad)):
        bad = [s.name for s in e.layout if not np.all(np.isfinite(grad[s.offset : s.offset + s.size]))]
        raise FloatingPointError(f"non-finite gradient in {bad}; parameters left unchanged")
    mask = e.trainable_mask()
    g = np.where(mask, grad, 0.0)
    if velocity is not None and momentum:
        velocity *= momentum
        velocity += g
        step = velocity
    else:
        step = g
    e.params -= (lr * step).astype(e.params.dtype)
    return e


class SGD:
    """Momentum SGD over an embedder and, optionally, a linear head."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, e: Embedder, tape: GradientTape, head: LinearHead | None = None) -> Embedder:
        if tape.grad is None:
            tape.backward()
        if e.num_params:
            v = self._velocity.setdefault("phi", np.zeros(e.params.size, dtype=np.float64))
            sgd_step(e, tape, self.lr, self.momentum, v)
        elif e.frozen:
            raise FrozenEmbedderError(f"cannot update frozen {e.kind} embedder")
        if head is not None and tape.head_grad is not None:
            for name in ("weight", "bias"):
                g = tape.head_grad[name].astype(np.float64)
                v = self._velocity.setdefault(f"head.{name}", np.zeros_like(g))
                v *= self.momentum
                v += g
                arr = getattr(head, name)
                arr -= (self.lr * v).astype(arr.dtype)
        return e


# --------------------------------------------------------------------------- gradient check


@dataclass(frozen=True)
class GradCheck:
    max_error: float
    coords: tuple[int, ...]
    refined: tuple[int, ...] = ()  # coordinates whose step was shrunk past a nearby kink
    kinks: tuple[int, ...] = ()  # coordinates sitting exactly on a kink (one-sided comparison)


def gradient_check(
    e: Embedder,
    batch,
    epsilon: float = 1e-4,
    head: EpisodeHead | LinearHead | None = None,
    targets: np.ndarray | None = None,
    max_coords: int | None = None,
    seed: int = 0,
    refine: int = 3,
) -> GradCheck:
    """Compare the analytic gradient with central differences, in float64.

    Reports ``max |analytic - numeric| / max(1, |numeric|)`` over the checked
    coordinates, which exclude frozen parameters. ``max_coords`` subsamples.

    ReLU and max-pool make the loss piecewise smooth, and a secant of width
    ``2 * epsilon`` that straddles a kink is not a derivative estimate. When
    the central differences at ``h`` and ``h / 10`` disagree, the step is
    shrunk (at most ``refine`` times) and the finer estimate is used; such
    coordinates are listed in ``refined``. A coordinate exactly on a kink
    (e.g. a zero pre-activation under a zero bias) has no derivative: the
    one-sided slopes stay apart as the step shrinks. There the analytic value
    must match one of them, and the coordinate is listed in ``kinks``.
    """
    e64 = e.astype(np.float64)
    e64.frozen = False
    n = len(batch)
    if head is None:
        rng = make_rng(seed, "gradcheck")
        n_cls = 3
        head = LinearHead(
            rng.standard_normal((n_cls, e.embedding_dim)) / math.sqrt(e.embedding_dim), rng.standard_normal(n_cls)
        )
        targets = np.eye(n_cls)[rng.integers(0, n_cls, size=n)]
    elif targets is None:
        raise ValueError("targets are required when a head is given")
    if isinstance(head, LinearHead):
        head = LinearHead(head.weight.astype(np.float64), head.bias.astype(np.float64))
    batch64 = np.asarray(e._inputs(batch), dtype=np.float64) if e.kind != "table" else batch

    params = e64.params
    _, tape = forward_loss(e64, batch64, targets, head, params)
    analytic = tape.backward()

    def loss_at(c: int, value: float) -> float:
        orig = params[c]
        params[c] = value
        out, _ = forward_loss(e64, batch64, targets, head, params)
        params[c] = orig
        return out

    def central(c: int, h: float) -> float:
        return (loss_at(c, params[c] + h) - loss_at(c, params[c] - h)) / (2 * h)

    def one_sided(c: int, h: float) -> tuple[float, float]:
        f0 = loss_at(c, params[c])
        return (loss_at(c, params[c] + h) - f0) / h, (f0 - loss_at(c, params[c] - h)) / h

    def rel(a: float, b: float) -> float:
        return abs(a - b) / max(1.0, abs(b))

    trainable = e.trainable_mask()
    candidates = np.flatnonzero(trainable)
    if max_coords is not None and candidates.size > max_coords:
        candidates = np.sort(make_rng(seed, "gradcheck-coords").choice(candidates, max_coords, replace=False))
    worst = 0.0
    refined, kinks = [], []
    for c in candidates:
        h = epsilon
        numeric = central(c, h)
        for _ in range(refine):
            finer = central(c, h / 10)
            if rel(finer, numeric) <= 1e-6:
                break
            h /= 10
            numeric = finer
        if h != epsilon:
            refined.append(int(c))
        err = rel(analytic[c], numeric)
        if err > 1e-6 and refine:
            fw, bw = one_sided(c, h)
            fw2, bw2 = one_sided(c, h / 10)
            if abs(fw2 - bw2) > 0.5 * abs(fw - bw) > 0:
                kinks.append(int(c))
                err = min(rel(analytic[c], fw2), rel(analytic[c], bw2))
        worst = max(worst, err)
    return GradCheck(float(worst), tuple(int(c) for c in candidates), tuple(refined), tuple(kinks))


# --------------------------------------------------------------------------- persistence


def save_checkpoint(e: Embedder, path: str | Path, **training_meta) -> None:
    if e.kind == "table":
        binfmt.write_table(path, e.table)
        return
    meta = {
        "kind": e.kind,
        "input_spec": list(e.input_spec),
        "embedding_dim": e.embedding_dim,
        "arch": e.arch,
        "frozen": e.frozen,
        "frozen_groups": sorted(e.frozen_groups),
        "layout": [[s.name, list(s.shape)] for s in e.layout],
        "training": {**e.meta, **training_meta},
    }
    binfmt.write_checkpoint(path, e.params, e.embedding_dim, meta)


def load_checkpoint(path: str | Path) -> Embedder:
    """Load a ``PSCK`` checkpoint, or a ``PSHT`` table as a table embedder."""
    magic = binfmt.sniff(path)
    if magic == binfmt.TABLE_MAGIC:
        return load_embedding_table(path)
    params, dim, meta = binfmt.read_checkpoint(path)
    if dim != meta["embedding_dim"]:
        raise binfmt.FormatError(f"{path}: header dim {dim} disagrees with metadata {meta['embedding_dim']}")
    e = Embedder(
        meta["kind"],
        tuple(meta["input_spec"]),
        dim,
        params,
        meta["arch"],
        meta["frozen"],
        frozenset(meta["frozen_groups"]),
        meta=meta.get("training", {}),
    )
    if [[s.name, list(s.shape)] for s in e.layout] != meta["layout"]:
        raise binfmt.FormatError(f"{path}: layout does not match the {e.kind} architecture")
    return e


def load_embedding_table(path: str | Path) -> Embedder:
    return table_embedder(binfmt.read_table(path))
