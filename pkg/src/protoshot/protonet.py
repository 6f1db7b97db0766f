"""Class prototypes, distance-softmax posteriors and the episodic loss.

Embeddings are plain float arrays. ``episode_loss_grad`` also returns the
adjoints with respect to the support and query embeddings so the loss can be
backpropagated into an embedder.
"""

from __future__ import annotations

from collections.abc import Hashable, Sequence
from dataclasses import dataclass

import numpy as np

DISTANCES = ("sqeuclidean", "euclidean", "cosine")
_EUCLID_EPS = 1e-12


class ProtoNetError(ValueError):
    pass


def _check_kind(kind: str) -> None:
    if kind not in DISTANCES:
        raise ProtoNetError(f"unknown distance kind {kind!r}; expected one of {DISTANCES}")


def distance(a, b, kind: str = "sqeuclidean") -> float:
    """Distance between two vectors; squared-Euclidean, Euclidean, or cosine (``1 - cos``)."""
    _check_kind(kind)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ProtoNetError(f"distance needs equal-length vectors, got {a.shape} and {b.shape}")
    return float(pairwise_distances(a[None], b[None], kind)[0, 0])


def pairwise_distances(queries: np.ndarray, protos: np.ndarray, kind: str = "sqeuclidean") -> np.ndarray:
    """(Q, M) x (N, M) -> (Q, N) distance matrix."""
    _check_kind(kind)
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(protos, dtype=np.float64)
    if q.ndim != 2 or c.ndim != 2 or q.shape[1] != c.shape[1]:
        raise ProtoNetError(f"dimension mismatch: queries {q.shape}, prototypes {c.shape}")
    if kind == "cosine":
        qn = np.linalg.norm(q, axis=1)
        cn = np.linalg.norm(c, axis=1)
        if np.any(qn == 0) or np.any(cn == 0):
            raise ProtoNetError("cosine distance undefined for a zero vector")
        cos = (q @ c.T) / np.outer(qn, cn)
        return np.clip(1.0 - cos, 0.0, 2.0)
    diff = q[:, None, :] - c[None, :, :]
    sq = np.einsum("qnm,qnm->qn", diff, diff)
    return sq if kind == "sqeuclidean" else np.sqrt(sq)


@dataclass(frozen=True)
class PrototypeSet:
    classes: tuple
    vectors: np.ndarray  # (N, M)
    distance_kind: str = "sqeuclidean"

    def __post_init__(self):
        _check_kind(self.distance_kind)
        if self.vectors.ndim != 2 or len(self.classes) != self.vectors.shape[0]:
            raise ProtoNetError("prototype vectors must be (N, M) with one row per class")
        if not np.all(np.isfinite(self.vectors)):
            raise ProtoNetError("non-finite prototype")

    def __getitem__(self, cls: Hashable) -> np.ndarray:
        return self.vectors[self.classes.index(cls)]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ClassPosterior:
    classes: tuple
    probabilities: np.ndarray
    distances: np.ndarray | None = None

    @property
    def predicted(self):
        # distances resolve probability ties that exp() rounded away; the first
        # minimum wins, i.e. the lowest class index on exact ties
        if self.distances is not None:
            return self.classes[int(np.argmin(self.distances))]
        return self.classes[int(np.argmax(self.probabilities))]


def class_means(embeddings: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Mean embedding per integer label 0..n_classes-1."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise ProtoNetError(f"empty class in support: labels {np.flatnonzero(counts == 0).tolist()}")
    sums = np.zeros((n_classes, emb.shape[1]))
    np.add.at(sums, labels, emb)
    return sums / counts[:, None]


def compute_prototypes(support: Sequence[tuple[np.ndarray, Hashable]], kind: str = "sqeuclidean") -> PrototypeSet:
    """Prototype of each class as the arithmetic mean of its support embeddings.

    Classes are ordered by first appearance of a sorted label list, so the
    result does not depend on the order of ``support``.
    """
    if not support:
        raise ProtoNetError("empty support set")
    dims = {np.asarray(e).shape for e, _ in support}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise ProtoNetError(f"support embeddings must be vectors of one length, got shapes {sorted(dims)}")
    classes = tuple(sorted({c for _, c in support}, key=repr))
    lookup = {c: i for i, c in enumerate(classes)}
    emb = np.stack([np.asarray(e, dtype=np.float64) for e, _ in support])
    labels = np.array([lookup[c] for _, c in support])
    return PrototypeSet(classes, class_means(emb, labels, len(classes)), kind)


def _softmax_neg(d: np.ndarray) -> np.ndarray:
    z = -d
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def posterior(query, protos: PrototypeSet) -> ClassPosterior:
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (protos.dim,):
        raise ProtoNetError(f"query has shape {q.shape}, prototypes have dim {protos.dim}")
    if len(protos.classes) < 2:
        raise ProtoNetError("posterior needs at least 2 prototypes")
    d = pairwise_distances(q[None], protos.vectors, protos.distance_kind)[0]
    if not np.all(np.isfinite(d)):
        raise ProtoNetError("non-finite distance")
    return ClassPosterior(protos.classes, _softmax_neg(d), d)


def predict(queries: np.ndarray, protos: np.ndarray, kind: str = "sqeuclidean") -> np.ndarray:
    """Nearest-prototype labels (lowest index on ties) for a (Q, M) batch."""
    return np.argmin(pairwise_distances(queries, protos, kind), axis=1)


def episode_loss(
    support: Sequence[tuple[np.ndarray, Hashable]],
    queries: Sequence[tuple[np.ndarray, Hashable]],
    kind: str = "sqeuclidean",
) -> tuple[float, list[ClassPosterior]]:
    """Mean negative log posterior of each query's true class."""
    protos = compute_prototypes(support, kind)
    missing = {c for _, c in queries} - set(protos.classes)
    if missing:
        raise ProtoNetError(f"query class absent from support: {sorted(missing, key=repr)}")
    posts = [posterior(q, protos) for q, _ in queries]
    nll = [-np.log(max(p.probabilities[protos.classes.index(c)], np.finfo(float).tiny)) for p, (_, c) in zip(posts, queries)]
    return float(np.mean(nll)), posts


def episode_loss_grad(
    support_emb: np.ndarray,
    support_labels: np.ndarray,
    query_emb: np.ndarray,
    query_targets: np.ndarray,
    kind: str = "sqeuclidean",
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Loss, query posteriors, and adjoints w.r.t. support and query embeddings.

    ``query_targets`` is a (Q, N) row-stochastic matrix (one-hot for the plain
    episodic loss); the loss is the mean cross-entropy against it. Gradients
    are returned in the dtype of ``support_emb``.
    """
    _check_kind(kind)
    dtype = np.result_type(support_emb.dtype, np.float32)
    s = np.asarray(support_emb, dtype=np.float64)
    q = np.asarray(query_emb, dtype=np.float64)
    t = np.asarray(query_targets, dtype=np.float64)
    n = t.shape[1]
    labels = np.asarray(support_labels)
    counts = np.bincount(labels, minlength=n).astype(np.float64)
    c = class_means(s, labels, n)

    d = pairwise_distances(q, c, kind)
    if not np.all(np.isfinite(d)):
        raise ProtoNetError("non-finite distance in episode")
    logits = -d
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    n_q = q.shape[0]
    loss = float(-(t * log_p).sum() / n_q)

    g_logits = (p - t) / n_q  # dL/dlogit
    g_d = -g_logits  # dL/dd
    if kind == "cosine":
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        cn = np.linalg.norm(c, axis=1, keepdims=True)
        qh, ch = q / qn, c / cn
        cos = qh @ ch.T
        # d = 1 - cos; dcos/dq = (ch - cos * qh) / |q|
        g_q = -(g_d @ ch - (g_d * cos).sum(axis=1, keepdims=True) * qh) / qn
        g_c = -(g_d.T @ qh - (g_d * cos).sum(axis=0)[:, None] * ch) / cn
    else:
        if kind == "euclidean":
            g_d = g_d / (2.0 * np.maximum(d, _EUCLID_EPS))
        # d_sq = |q - c|^2
        g_q = 2.0 * (g_d.sum(axis=1, keepdims=True) * q - g_d @ c)
        g_c = 2.0 * (g_d.sum(axis=0)[:, None] * c - g_d.T @ q)
    g_s = (g_c / counts[:, None])[labels]
    return loss, p, g_s.astype(dtype), g_q.astype(dtype)
