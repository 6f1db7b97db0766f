"""Seeded N-way K-shot episodic evaluation over novel classes, plus metric aggregation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from protoshot._seeding import make_rng
from protoshot.dataset import LongTailDataset
from protoshot.protonet import class_means, predict

log = logging.getLogger(__name__)

Z_95 = 1.96
QUERY_MODES = ("per-class", "pooled")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int
    k_shot: int
    n_query: int = 5
    episodes: int = 1000
    master_seed: int = 0
    query_mode: str = "per-class"
    distance: str = "sqeuclidean"

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1 or self.episodes < 1:
            raise EvalError(f"need N >= 2, K >= 1, M >= 1, E >= 1; got {self}")
        if self.query_mode not in QUERY_MODES:
            raise EvalError(f"query_mode must be one of {QUERY_MODES}")

    @property
    def cell(self) -> str:
        return f"{self.n_way}w{self.k_shot}s"

    @property
    def queries_per_episode(self) -> int:
        return self.n_way * self.n_query if self.query_mode == "per-class" else self.n_query


@dataclass(frozen=True)
class Episode:
    index: int
    classes: tuple[str, ...]
    support: tuple[int, ...]  # dataset indices, class-major
    support_labels: tuple[int, ...]  # episode-local class ids
    query: tuple[int, ...]
    query_labels: tuple[int, ...]


def eligible_classes(novel: LongTailDataset, spec: EpisodeSpec) -> list[str]:
    counts = novel.counts()
    floor = spec.k_shot + (spec.n_query if spec.query_mode == "per-class" else 1)
    keep = [c for c in novel.classes if counts[c] >= floor]
    dropped = sorted(set(novel.classes) - set(keep))
    if dropped:
        log.warning("excluding %d classes smaller than %d examples: %s", len(dropped), floor, dropped)
    if len(keep) < spec.n_way:
        sizes = ", ".join(f"{c}={counts[c]}" for c in novel.classes)
        raise EvalError(
            f"only {len(keep)} classes have >= {floor} examples, need {spec.n_way} for {spec.cell}; class sizes: {sizes}"
        )
    return keep


def sample_episode(
    novel: LongTailDataset, spec: EpisodeSpec, e: int, eligible: list[str] | None = None
) -> Episode:
    """Episode ``e`` depends only on (novel set, spec, e): one rng stream per index."""
    pool = eligible if eligible is not None else eligible_classes(novel, spec)
    rng = make_rng(spec.master_seed, "episode", e)
    chosen = [pool[i] for i in rng.choice(len(pool), size=spec.n_way, replace=False)]
    support, s_lab, query, q_lab = [], [], [], []
    remaining: list[tuple[int, int]] = []
    for k, label in enumerate(chosen):
        members = novel.members(label)
        order = rng.permutation(len(members))
        picked = [members[i] for i in order]
        support += picked[: spec.k_shot]
        s_lab += [k] * spec.k_shot
        if spec.query_mode == "per-class":
            query += picked[spec.k_shot : spec.k_shot + spec.n_query]
            q_lab += [k] * spec.n_query
        else:
            remaining += [(idx, k) for idx in picked[spec.k_shot :]]
    if spec.query_mode == "pooled":
        if len(remaining) < spec.n_query:
            raise EvalError(f"episode {e}: only {len(remaining)} samples left for {spec.n_query} pooled queries")
        for i in rng.choice(len(remaining), size=spec.n_query, replace=False):
            query.append(remaining[i][0])
            q_lab.append(remaining[i][1])
    return Episode(e, tuple(chosen), tuple(support), tuple(s_lab), tuple(query), tuple(q_lab))


def macro_f1(true: np.ndarray, pred: np.ndarray, n_classes: int) -> float:
    """Macro-averaged one-vs-rest F1 over ``n_classes``; 0/0 counts as 0."""
    true = np.asarray(true)
    pred = np.asarray(pred)
    scores = []
    for k in range(n_classes):
        tp = np.sum((pred == k) & (true == k))
        fp = np.sum((pred == k) & (true != k))
        fn = np.sum((pred != k) & (true == k))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom and tp else 0.0)
    return float(np.mean(scores))


def aggregate(values) -> tuple[float, float | None]:
    """Mean and 95% normal-approximation half-width ``1.96 * s / sqrt(E)`` (None when E < 2)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EvalError("cannot aggregate an empty list")
    mean = float(math.fsum(v) / v.size)
    if v.size < 2:
        return mean, None
    return mean, float(Z_95 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class EvalReport:
    spec: EpisodeSpec
    accuracies: list[float]
    f1_scores: list[float]
    acc_mean: float
    acc_half_width: float | None
    f1_mean: float
    f1_half_width: float | None
    episode_digest: str
    regime: str = ""
    backbone: str = ""
    config_hash: str = ""
    wall_clock_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def body(self) -> dict:
        """Deterministic part of the report (everything except timing)."""
        return {
            "regime": self.regime,
            "backbone": self.backbone,
            "spec": asdict(self.spec),
            "cell": self.spec.cell,
            "config_hash": self.config_hash,
            "episode_digest": self.episode_digest,
            "accuracy": {"mean": self.acc_mean, "half_width_95": self.acc_half_width},
            "macro_f1": {"mean": self.f1_mean, "half_width_95": self.f1_half_width},
            "per_episode_accuracy": self.accuracies,
            "per_episode_macro_f1": self.f1_scores,
            "extra": self.extra,
        }

    def to_json(self) -> dict:
        body = self.body()
        raw = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return {
            "schema": "protoshot.eval_report/1",
            "body": body,
            "body_sha256": hashlib.sha256(raw).hexdigest(),
            "timing": {"wall_clock_s": self.wall_clock_s},
        }

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        b = obj["body"]
        return cls(
            spec=EpisodeSpec(**b["spec"]),
            accuracies=list(b["per_episode_accuracy"]),
            f1_scores=list(b["per_episode_macro_f1"]),
            acc_mean=b["accuracy"]["mean"],
            acc_half_width=b["accuracy"]["half_width_95"],
            f1_mean=b["macro_f1"]["mean"],
            f1_half_width=b["macro_f1"]["half_width_95"],
            episode_digest=b["episode_digest"],
            regime=b["regime"],
            backbone=b["backbone"],
            config_hash=b["config_hash"],
            wall_clock_s=obj.get("timing", {}).get("wall_clock_s", 0.0),
            extra=b.get("extra", {}),
        )

    CSV_HEADER = ("regime", "backbone", "N", "K", "M", "E", "seed", "acc_mean", "acc_hw", "f1_mean", "f1_hw")

    def csv_row(self) -> tuple:
        s = self.spec
        return (
            self.regime,
            self.backbone,
            s.n_way,
            s.k_shot,
            s.n_query,
            s.episodes,
            s.master_seed,
            repr(self.acc_mean),
            "" if self.acc_half_width is None else repr(self.acc_half_width),
            repr(self.f1_mean),
            "" if self.f1_half_width is None else repr(self.f1_half_width),
        )


def _thread_count(workers: int | None) -> int:
    if workers is not None:
        return max(1, workers)
    env = os.environ.get("PROTOSHOT_THREADS")
    return max(1, int(env)) if env else 1


def score_episode(ep: Episode, embeddings: np.ndarray, n_way: int, distance: str) -> tuple[float, float]:
    sup = embeddings[list(ep.support)]
    qry = embeddings[list(ep.query)]
    protos = class_means(sup, np.asarray(ep.support_labels), n_way)
    pred = predict(qry, protos, distance)
    true = np.asarray(ep.query_labels)
    return float(np.mean(pred == true)), macro_f1(true, pred, n_way)


def episode_digest(episodes) -> str:
    h = hashlib.sha256()
    for ep in episodes:
        h.update(repr((ep.index, ep.classes, ep.support, ep.query)).encode("utf-8"))
    return h.hexdigest()


def evaluate(
    embedder,
    novel: LongTailDataset,
    spec: EpisodeSpec,
    workers: int | None = None,
    regime: str = "",
    backbone: str = "",
    config_hash: str = "",
) -> EvalReport:
    """Run ``spec.episodes`` episodes with a fixed embedder and nearest-prototype classification.

    Novel examples are embedded once (the embedder is a pure function and no
    augmentation touches novel data); each episode then only indexes rows.
    """
    t0 = time.perf_counter()
    eligible = eligible_classes(novel, spec)
    try:
        embeddings = embedder.embed_batch(list(novel.examples))
    except Exception as err:
        raise EvalError(f"embedding novel examples failed: {err}") from err
    embeddings = np.asarray(embeddings, dtype=np.float64)
    n_threads = _thread_count(workers)

    def run(e: int):
        ep = sample_episode(novel, spec, e, eligible)
        return ep, score_episode(ep, embeddings, spec.n_way, spec.distance)

    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            results = list(pool.map(run, range(spec.episodes)))
    else:
        results = [run(e) for e in range(spec.episodes)]

    accs = [r[1][0] for r in results]
    f1s = [r[1][1] for r in results]
    acc_mean, acc_hw = aggregate(accs)
    f1_mean, f1_hw = aggregate(f1s)
    return EvalReport(
        spec=spec,
        accuracies=accs,
        f1_scores=f1s,
        acc_mean=acc_mean,
        acc_half_width=acc_hw,
        f1_mean=f1_mean,
        f1_half_width=f1_hw,
        episode_digest=episode_digest(r[0] for r in results),
        regime=regime,
        backbone=backbone,
        config_hash=config_hash,
        wall_clock_s=time.perf_counter() - t0,
    )
