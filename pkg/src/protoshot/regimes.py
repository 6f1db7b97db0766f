"""The four training regimes: FEL, FETL, DTL and DL.

* FEL  -- episodic prototypical training from random initialisation.
* FETL -- the same episodic loop starting from a pretrained embedder.
* DTL  -- conventional mini-batch classification fine-tuning of a pretrained
  embedder on base classes (linear head, discarded afterwards).
* DL   -- the pretrained embedder, frozen, no training at all.

``pretrain_source`` produces the "pretrained" artifact from a source domain
whose classes are disjoint from the target domain. No function here accepts
novel-class data.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from protoshot._seeding import derive_seed, make_rng, stable_hash
from protoshot.augment import AugPolicy, apply_policy, augment_image
from protoshot.dataset import BaseData, LongTailDataset, split_fraction
from protoshot.evaluation import EpisodeSpec, EvalError, eligible_classes, evaluate, sample_episode
from protoshot.nn import SGD, Embedder, EpisodeHead, LinearHead, forward_loss, make_embedder

log = logging.getLogger(__name__)

REGIMES = ("FEL", "FETL", "DTL", "DL")


class RegimeError(ValueError):
    pass


@dataclass(frozen=True)
class EpisodicConfig:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 5
    episodes_per_epoch: int = 100
    epochs: int = 20
    val_episodes: int = 100
    patience: int = 10


@dataclass(frozen=True)
class ConventionalConfig:
    batch_size: int = 32
    epochs: int = 20
    val_fraction: float = 0.10
    patience: int = 10


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "linear"
    embedding_dim: int = 64
    widths: tuple[int, ...] = (8, 16, 32, 64)
    freeze_depth: int = 0


@dataclass(frozen=True)
class RegimeConfig:
    regime: str
    init: str = "random"
    pretrained_path: str | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    episodic: EpisodicConfig = field(default_factory=EpisodicConfig)
    conventional: ConventionalConfig = field(default_factory=ConventionalConfig)
    aug: AugPolicy = field(default_factory=AugPolicy)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    distance: str = "sqeuclidean"
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise RegimeError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.init not in ("random", "pretrained"):
            raise RegimeError(f"init must be 'random' or 'pretrained', got {self.init!r}")
        if self.regime == "FEL" and self.init != "random":
            raise RegimeError("FEL trains from random initialisation and never consumes a checkpoint")
        if self.regime != "FEL" and self.init != "pretrained":
            raise RegimeError(f"{self.regime} requires init='pretrained'")
        if self.optimizer.lr <= 0 or not 0 <= self.optimizer.momentum < 1:
            raise RegimeError("optimizer needs lr > 0 and 0 <= momentum < 1")

    @classmethod
    def for_regime(cls, regime: str, **kw) -> RegimeConfig:
        return cls(regime, init="random" if regime == "FEL" else "pretrained", **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aug"] = self.aug.to_dict()
        d["backbone"]["widths"] = list(self.backbone.widths)
        return d

    @property
    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float | None
    wall_clock_s: float


@dataclass
class TrainLog:
    regime: str
    seed: int
    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None
    val_metric_name: str = ""

    @property
    def losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def to_jsonl(self) -> str:
        lines = []
        for r in self.records:
            row = asdict(r)
            row.update(regime=self.regime, seed=self.seed, selected=r.epoch == self.selected_epoch)
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")


class _Selector:
    """Best-validation snapshotting with patience-based early stopping."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch: int | None = None
        self.snapshot = None
        self.stale = 0

    def update(self, epoch: int, metric: float | None, snapshot) -> bool:
        """Record an epoch; returns True when training should stop."""
        if metric is None:
            self.best_epoch, self.snapshot = epoch, snapshot()
            return False
        if self.best is None or metric > self.best:
            self.best, self.best_epoch, self.snapshot, self.stale = metric, epoch, snapshot(), 0
            return False
        self.stale += 1
        return self.stale >= self.patience


def _stamp(e: Embedder, cfg: RegimeConfig, log_: TrainLog, epochs: int) -> Embedder:
    e.meta = {
        "regime": cfg.regime,
        "epochs": epochs,
        "selected_epoch": log_.selected_epoch,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash,
    }
    return e


def _check_input(e: Embedder, data: LongTailDataset) -> None:
    if e.kind == "table":
        missing = [ex.source_id for ex in data if ex.source_id not in e.table]
        if missing:
            raise RegimeError(f"table embedder lacks {len(missing)} source_ids, e.g. {missing[0]}")
    elif data.input_shape != e.input_spec:
        raise RegimeError(f"incompatible input_spec: embedder {e.input_spec}, data {data.input_shape}")


# --------------------------------------------------------------------------- episodic loop


def _episodic_val_spec(val: LongTailDataset | None, cfg: RegimeConfig) -> EpisodeSpec | None:
    if val is None or len(val) == 0:
        return None
    ec = cfg.episodic
    floor = ec.k_shot + ec.n_query
    usable = sum(1 for n in val.counts().values() if n >= floor)
    if usable < 2:
        log.warning("%s: base_val has %d usable classes; selecting the last epoch", cfg.regime, usable)
        return None
    n_way = min(ec.n_way, usable)
    if n_way < ec.n_way:
        log.warning("%s: validating %d-way (only %d base_val classes)", cfg.regime, n_way, usable)
    return EpisodeSpec(n_way, ec.k_shot, ec.n_query, ec.val_episodes, derive_seed(cfg.seed, "val-episodes"), distance=cfg.distance)


def _episodic_train(e: Embedder, base: BaseData, cfg: RegimeConfig) -> tuple[Embedder, TrainLog]:
    ec = cfg.episodic
    train_spec = EpisodeSpec(ec.n_way, ec.k_shot, ec.n_query, 1, 0, distance=cfg.distance)
    try:
        pool = eligible_classes(base.train, train_spec)
    except EvalError as err:
        raise RegimeError(f"insufficient base-train data for {ec.n_way}-way {ec.k_shot}-shot training: {err}") from err
    _check_input(e, base.train)
    val_spec = _episodic_val_spec(base.val, cfg)
    trainlog = TrainLog(cfg.regime, cfg.seed, val_metric_name="episodic_val_acc" if val_spec else "")
    opt = SGD(cfg.optimizer.lr, cfg.optimizer.momentum)
    aug_rng = make_rng(cfg.seed, "episodic-aug")
    targets = np.repeat(np.eye(ec.n_way), ec.n_query, axis=0)
    selector = _Selector(ec.patience)
    ran = 0
    for epoch in range(1, ec.epochs + 1):
        t0 = time.perf_counter()
        ep_spec = replace(train_spec, master_seed=derive_seed(cfg.seed, "train-episodes", epoch))
        losses = []
        for it in range(ec.episodes_per_epoch):
            ep = sample_episode(base.train, ep_spec, it, pool)
            batch = [augment_image(base.train[i], cfg.aug.ops, aug_rng) for i in ep.support + ep.query]
            head = EpisodeHead(np.asarray(ep.support_labels), ec.n_way, cfg.distance)
            loss, tape = forward_loss(e, batch, targets, head)
            opt.step(e, tape)
            losses.append(loss)
        val = evaluate(e, base.val, val_spec).acc_mean if val_spec else None
        trainlog.records.append(EpochRecord(epoch, math.fsum(losses) / len(losses), val, time.perf_counter() - t0))
        ran = epoch
        stop = selector.update(epoch, val, lambda: e.params.copy())
        if stop:
            log.info("%s: early stop at epoch %d (best %s)", cfg.regime, epoch, selector.best_epoch)
            break
    if selector.snapshot is not None:
        e.params = selector.snapshot
    trainlog.selected_epoch = selector.best_epoch
    return _stamp(e, cfg, trainlog, ran), trainlog


def _init_embedder(cfg: RegimeConfig, input_shape) -> Embedder:
    b = cfg.backbone
    e = make_embedder(b.kind, input_shape, b.embedding_dim, seed=derive_seed(cfg.seed, "init"), widths=b.widths)
    return e.freeze_depth(b.freeze_depth) if b.freeze_depth else e


def train_fel(base: BaseData, cfg: RegimeConfig) -> tuple[Embedder, TrainLog]:
    if cfg.regime != "FEL":
        raise RegimeError(f"train_fel got a {cfg.regime} config")
    if base.train.input_shape is None:
        raise RegimeError("empty base-train set")
    return _episodic_train(_init_embedder(cfg, base.train.input_shape), base, cfg)


def _from_pretrained(pretrained: Embedder, cfg: RegimeConfig) -> Embedder:
    e = pretrained.copy()
    if cfg.backbone.freeze_depth:
        e.freeze_depth(cfg.backbone.freeze_depth)
    return e


def train_fetl(base: BaseData, pretrained: Embedder, cfg: RegimeConfig) -> tuple[Embedder, TrainLog]:
    """Episodic fine-tuning from pretrained weights.

    The frozen flag of ``pretrained`` is preserved, so passing a frozen
    embedder fails at the first update rather than silently unfreezing it.
    """
    if cfg.regime != "FETL":
        raise RegimeError(f"train_fetl got a {cfg.regime} config")
    return _episodic_train(_from_pretrained(pretrained, cfg), base, cfg)


# --------------------------------------------------------------------------- conventional loop


def top1_accuracy(e: Embedder, head: LinearHead, data: LongTailDataset, classes: tuple[str, ...]) -> float:
    lookup = {c: i for i, c in enumerate(classes)}
    z = e.embed_batch(list(data.examples))
    pred = np.argmax(head.logits(z.astype(np.float64)), axis=1)
    true = np.array([lookup[ex.label] for ex in data])
    return float(np.mean(pred == true))


def _conventional_train(
    e: Embedder, data: LongTailDataset, cfg: RegimeConfig, tag: str
) -> tuple[Embedder, LinearHead, TrainLog]:
    cc = cfg.conventional
    if cfg.aug.mix != "none" and cc.batch_size < 2:
        raise RegimeError("batch size < 2 with a mix policy active")
    _check_input(e, data)
    split = split_fraction(data, cc.val_fraction, derive_seed(cfg.seed, tag, "split"))
    train, val = split.apply(data)
    classes = data.classes
    head = LinearHead.init(e.embedding_dim, len(classes), seed=derive_seed(cfg.seed, tag, "head"))
    opt = SGD(cfg.optimizer.lr, cfg.optimizer.momentum)
    rng = make_rng(cfg.seed, tag, "batches")
    trainlog = TrainLog(cfg.regime, cfg.seed, val_metric_name="val_top1" if len(val) else "")
    selector = _Selector(cc.patience)
    n_batches = max(1, math.ceil(len(train) / cc.batch_size))
    ran = 0
    for epoch in range(1, cc.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for chunk in np.array_split(rng.permutation(len(train)), n_batches):
            batch = [train[int(i)] for i in chunk]
            if cfg.aug.mix != "none" and len(batch) < 2:
                continue
            mixed = apply_policy(batch, cfg.aug, rng, classes)
            x = np.stack([m.image for m in mixed])
            t = np.stack([m.soft_label for m in mixed])
            loss, tape = forward_loss(e, x, t, head)
            opt.step(e, tape, head)
            losses.append(loss)
        val_acc = top1_accuracy(e, head, val, classes) if len(val) else None
        trainlog.records.append(EpochRecord(epoch, math.fsum(losses) / max(1, len(losses)), val_acc, time.perf_counter() - t0))
        ran = epoch

        def snap():
            return e.params.copy(), head.weight.copy(), head.bias.copy()

        if selector.update(epoch, val_acc, snap):
            break
    if selector.snapshot is not None:
        e.params, head.weight, head.bias = selector.snapshot
    trainlog.selected_epoch = selector.best_epoch
    return _stamp(e, cfg, trainlog, ran), head, trainlog


def train_dtl(base: BaseData, pretrained: Embedder, cfg: RegimeConfig) -> tuple[Embedder, TrainLog]:
    """Conventional fine-tuning on base-train classes; the classification head is discarded."""
    if cfg.regime != "DTL":
        raise RegimeError(f"train_dtl got a {cfg.regime} config")
    e, _, trainlog = _conventional_train(_from_pretrained(pretrained, cfg), base.train, cfg, "dtl")
    return e, trainlog


def make_dl(pretrained: Embedder) -> Embedder:
    e = pretrained.copy()
    e.frozen = True
    e.meta = {**e.meta, "regime": "DL", "epochs": 0}
    return e


def pretrain_source(
    source: LongTailDataset,
    cfg: RegimeConfig,
    target_classes: Iterable[str] = (),
) -> tuple[Embedder, TrainLog]:
    """Conventionally train a fresh embedder on a source domain disjoint from the target classes."""
    overlap = set(source.classes) & set(target_classes)
    if overlap:
        raise RegimeError(f"source classes overlap the target domain: {sorted(overlap)}")
    if source.input_shape is None:
        raise RegimeError("empty source dataset")
    init_cfg = replace(cfg, regime="FEL", init="random")
    e = _init_embedder(init_cfg, source.input_shape)
    e, _, trainlog = _conventional_train(e, source, cfg, "pretrain")
    e.meta["regime"] = "pretrain"
    trainlog.regime = "pretrain"
    return e, trainlog


def run_regime(
    cfg: RegimeConfig, base: BaseData, pretrained: Embedder | None = None
) -> tuple[Embedder, TrainLog | None]:
    """Dispatch to the regime's trainer; every regime returns an Embedder."""
    if cfg.regime == "FEL":
        return train_fel(base, cfg)
    if pretrained is None:
        raise RegimeError(f"{cfg.regime} needs a pretrained embedder")
    if cfg.regime == "FETL":
        return train_fetl(base, pretrained, cfg)
    if cfg.regime == "DTL":
        return train_dtl(base, pretrained, cfg)
    return make_dl(pretrained), None
