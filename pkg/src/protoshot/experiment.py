"""Experiment pipeline: data loading, pretrain -> train -> eval -> report, and the full sweep."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from protoshot.config import ExperimentConfig
from protoshot.dataset import (
    BaseData,
    ClassPartition,
    LongTailDataset,
    generate_synthetic,
    load_manifest,
    split_longtail,
)
from protoshot.evaluation import EvalReport, evaluate
from protoshot.nn import Embedder, load_checkpoint, save_checkpoint
from protoshot.regimes import TrainLog, pretrain_source, run_regime
from protoshot.report import write_report, write_tables

log = logging.getLogger(__name__)


@dataclass
class ExperimentData:
    target: LongTailDataset
    partition: ClassPartition
    base: BaseData
    novel: LongTailDataset
    source: LongTailDataset | None = None


def load_data(cfg: ExperimentConfig) -> ExperimentData:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        target = generate_synthetic(ds.target)
        source = generate_synthetic(ds.source) if ds.source is not None else None
    else:
        target = load_manifest(cfg.resolve(ds.manifest))
        source = load_manifest(cfg.resolve(ds.source_manifest)) if ds.source_manifest else None
    part = split_longtail(target, ds.novel_max, ds.val_max, ds.exclude)
    return ExperimentData(target, part, BaseData.from_partition(target, part), target.subset(part.novel), source)


def obtain_pretrained(cfg: ExperimentConfig, data: ExperimentData) -> tuple[Embedder, TrainLog | None]:
    if cfg.pretrain.pretrained:
        return load_checkpoint(cfg.resolve(cfg.pretrain.pretrained)), None
    if data.source is None:
        raise RuntimeError("no source dataset to pretrain on; set [dataset.source] or pretrain.pretrained")
    return pretrain_source(data.source, cfg.pretrain_regime(), data.target.classes)


def resolve_regime(cfg: ExperimentConfig, name: str) -> str:
    """Accept a section name, or a bare regime type if exactly one section uses it."""
    if name in cfg.regimes:
        return name
    hits = [k for k, r in cfg.regimes.items() if r.regime == name]
    if len(hits) == 1:
        return hits[0]
    raise KeyError(f"no unique regime section for {name!r}; available: {sorted(cfg.regimes)}")


def train_named(cfg: ExperimentConfig, name: str, data: ExperimentData, pretrained: Embedder | None):
    rcfg = cfg.regimes[name]
    if rcfg.pretrained_path:
        pretrained = load_checkpoint(cfg.resolve(rcfg.pretrained_path))
    e, trainlog = run_regime(rcfg, data.base, pretrained)
    e.meta = {**e.meta, "name": name}
    return e, trainlog


def eval_cell(cfg: ExperimentConfig, name: str, embedder: Embedder, novel: LongTailDataset, cell: str) -> EvalReport:
    regime = cfg.regimes[name].regime if name in cfg.regimes else embedder.meta.get("regime", name)
    rep = evaluate(
        embedder,
        novel,
        cfg.eval.spec(cell),
        regime=name,
        backbone=embedder.kind,
        config_hash=cfg.cell_hash(name, cell),
    )
    rep.extra = {"regime_type": regime}
    return rep


@dataclass
class SweepResult:
    reports: list[EvalReport] = field(default_factory=list)
    failures: list[tuple[str, str, str]] = field(default_factory=list)  # (regime, cell or "*", message)

    @property
    def ok(self) -> bool:
        return not self.failures


def _workers() -> int:
    env = os.environ.get("PROTOSHOT_THREADS")
    return max(1, int(env)) if env else 1


def sweep(cfg: ExperimentConfig, out: str | Path) -> SweepResult:
    """Train every regime once, evaluate every (regime, cell), then emit the table.

    Completed cells are written as they finish; a failing regime or cell is
    recorded and the rest of the grid still runs.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    result = SweepResult()

    pretrained = None
    if cfg.needs_pretrained():
        try:
            pretrained, plog = obtain_pretrained(cfg, data)
            _mkdir(out / "checkpoints")
            save_checkpoint(pretrained, out / "checkpoints" / "pretrained.psck")
            if plog is not None:
                _mkdir(out / "logs")
                plog.write(out / "logs" / "pretrain.jsonl")
        except Exception as err:  # noqa: BLE001 - every non-FEL regime fails with it
            log.error("pretraining failed: %s", err)
            result.failures.append(("pretrain", "*", str(err)))

    models: dict[str, Embedder] = {}
    for name, rcfg in cfg.regimes.items():
        if rcfg.regime != "FEL" and pretrained is None and not rcfg.pretrained_path:
            result.failures.append((name, "*", "pretrained embedder unavailable"))
            continue
        try:
            e, trainlog = train_named(cfg, name, data, pretrained)
        except Exception as err:  # noqa: BLE001
            log.error("training %s failed: %s", name, err)
            result.failures.append((name, "*", str(err)))
            continue
        models[name] = e
        _mkdir(out / "checkpoints")
        save_checkpoint(e, out / "checkpoints" / f"{name}.psck")
        if trainlog is not None:
            _mkdir(out / "logs")
            trainlog.write(out / "logs" / f"{name}.jsonl")

    jobs = [(name, cell) for name in models for cell in cfg.eval.cells]

    def run(job):
        name, cell = job
        try:
            rep = eval_cell(cfg, name, models[name], data.novel, cell)
        except Exception as err:  # noqa: BLE001
            return job, None, str(err)
        write_report(rep, out / name / f"{cell}.json")
        return job, rep, None

    workers = _workers()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            done = list(pool.map(run, jobs))
    else:
        done = [run(j) for j in jobs]
    for (name, cell), rep, err in done:
        if rep is None:
            log.error("evaluating %s %s failed: %s", name, cell, err)
            result.failures.append((name, cell, err))
        else:
            result.reports.append(rep)

    meta = {
        "columns": list(cfg.regimes),
        "cells": list(cfg.eval.cells),
        "failures": [{"regime": r, "cell": c, "error": m} for r, c, m in result.failures],
    }
    (out / "sweep.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if result.reports:
        cols = [c for c in cfg.regimes if any(r.regime == c for r in result.reports)]
        write_tables(result.reports, out, _table_formats(cfg), cols, cfg.output.metric)
    return result


def _table_formats(cfg: ExperimentConfig) -> tuple[str, ...]:
    # csv and md are always produced; json on request
    return tuple(dict.fromkeys(("csv", "md") + tuple(cfg.output.formats)))


def _mkdir(p: Path) -> None:
    p.mkdir(parents=True, exist_ok=True)

