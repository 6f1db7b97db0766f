"""Experiment configuration: a TOML file with named sections.

Layout::

    [experiment]  name, seed
    [dataset]     kind = "synthetic" | "manifest", thresholds, exclusions
    [dataset.target] / [dataset.source]   SyntheticSpec fields (synthetic kind)
    [backbone]    kind, embedding_dim, widths, freeze_depth
    [pretrain]    conventional training of the source embedder (or `pretrained = path`)
    [regimes.<name>]  one RegimeConfig per column of the comparison table
    [eval]        cells, n_query, episodes, master_seed, query_mode, distance
    [output]      formats

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli
import tomli_w

from protoshot._seeding import stable_hash
from protoshot.augment import AugmentError, AugPolicy
from protoshot.dataset import DatasetError, SyntheticSpec
from protoshot.evaluation import QUERY_MODES, EpisodeSpec
from protoshot.protonet import DISTANCES
from protoshot.regimes import (
    REGIMES,
    BackboneConfig,
    ConventionalConfig,
    EpisodicConfig,
    OptimizerConfig,
    RegimeConfig,
    RegimeError,
)

CELL_RE = re.compile(r"^(\d+)w(\d+)s$")
TABLE_FORMATS = ("csv", "json", "md")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


def parse_cell(cell: str) -> tuple[int, int]:
    m = CELL_RE.match(cell.strip())
    if not m:
        raise ValueError(f"cell {cell!r} is not of the form <N>w<K>s, e.g. 5w5s")
    return int(m.group(1)), int(m.group(2))


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    novel_max: int = 20
    val_max: int = 30
    exclude: tuple[str, ...] = ()
    manifest: str | None = None
    source_manifest: str | None = None
    target: SyntheticSpec | None = None
    source: SyntheticSpec | None = None


@dataclass(frozen=True)
class PretrainConfig:
    pretrained: str | None = None
    conventional: ConventionalConfig = field(default_factory=ConventionalConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    aug: AugPolicy = field(default_factory=AugPolicy)


@dataclass(frozen=True)
class EvalConfig:
    cells: tuple[str, ...] = ("2w1s", "2w5s", "5w1s", "5w5s")
    n_query: int = 5
    episodes: int = 1000
    master_seed: int = 0
    query_mode: str = "per-class"
    distance: str = "sqeuclidean"

    def spec(self, cell: str) -> EpisodeSpec:
        n, k = parse_cell(cell)
        return EpisodeSpec(n, k, self.n_query, self.episodes, self.master_seed, self.query_mode, self.distance)


@dataclass(frozen=True)
class OutputConfig:
    formats: tuple[str, ...] = ("csv", "md")
    metric: str = "accuracy"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    regimes: dict[str, RegimeConfig] = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    base_dir: str = "."

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def pretrain_regime(self) -> RegimeConfig:
        """The pretraining run expressed as a conventional-training RegimeConfig."""
        p = self.pretrain
        return RegimeConfig(
            "DTL",
            init="pretrained",
            backbone=self.backbone,
            conventional=p.conventional,
            optimizer=p.optimizer,
            aug=p.aug,
            seed=self.seed,
        )

    def needs_pretrained(self) -> bool:
        return any(r.regime != "FEL" for r in self.regimes.values())

    @property
    def data_hash(self) -> str:
        return stable_hash(_to_plain(self.dataset))

    def cell_hash(self, regime_name: str, cell: str) -> str:
        reg = self.regimes[regime_name].to_dict() if regime_name in self.regimes else regime_name
        return stable_hash({"data": self.data_hash, "regime": reg, "pretrain": _to_plain(self.pretrain),
                            "eval": _to_plain(self.eval.spec(cell))})


# --------------------------------------------------------------------------- serialisation


def _to_plain(obj: Any) -> Any:
    if isinstance(obj, AugPolicy):
        return obj.to_dict()
    if isinstance(obj, RegimeConfig):
        return obj.to_dict()
    if hasattr(obj, "__dataclass_fields__"):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj) if getattr(obj, f.name) is not None}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def to_dict(cfg: ExperimentConfig) -> dict:
    d: dict[str, Any] = {"experiment": {"name": cfg.name, "seed": cfg.seed}}
    d["dataset"] = _to_plain(cfg.dataset)
    d["backbone"] = _to_plain(cfg.backbone)
    d["pretrain"] = _to_plain(cfg.pretrain)
    d["regimes"] = {}
    for name, r in cfg.regimes.items():
        rd = r.to_dict()
        rd.pop("backbone")
        rd.pop("seed")
        if rd.get("pretrained_path") is None:
            rd.pop("pretrained_path", None)
        d["regimes"][name] = rd
    d["eval"] = _to_plain(cfg.eval)
    d["output"] = _to_plain(cfg.output)
    return d


def dumps(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


class _Locator:
    """Maps a key path to the line where it is defined (best effort)."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def find(self, *path: str) -> int | None:
        header = None
        best = None
        for no, raw in enumerate(self.lines, start=1):
            line = raw.strip()
            if line.startswith("["):
                header = [p.strip().strip('"') for p in line.strip("[]").split(".")]
                if header == list(path):
                    best = best or no
                continue
            if "=" in line and header is not None:
                key = line.split("=", 1)[0].strip().strip('"')
                if header + [key] == list(path):
                    return no
                if header == list(path[:-1]) and best is None and key.split(".")[0] == path[-1]:
                    return no
        if best is None and len(path) > 1:
            return self.find(*path[:-1])
        return best


def _take(section: dict, cls, where: tuple[str, ...], loc: _Locator, src: str | None, convert=None):
    """Build dataclass ``cls`` from ``section``, rejecting unknown keys."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown key {'.'.join(where + (key,))!r}", loc.find(*where, key), src)
    kwargs = {}
    for k, v in section.items():
        if convert and k in convert:
            try:
                v = convert[k](v)
            except ConfigError:
                raise
            except (AugmentError, TypeError, ValueError, KeyError) as err:
                raise ConfigError(f"{'.'.join(where + (k,))}: {err}", loc.find(*where, k), src) from err
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, DatasetError, AugmentError, RegimeError) as err:
        raise ConfigError(f"[{'.'.join(where)}] {err}", loc.find(*where), src) from err


def _aug(d: dict) -> AugPolicy:
    return AugPolicy.from_dict(d)


def loads(text: str, base_dir: str | Path = ".", source: str | None = None, check_paths: bool = True) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        m = re.search(r"line (\d+)", str(err))
        raise ConfigError(f"TOML syntax error: {err}", int(m.group(1)) if m else None, source) from err
    loc = _Locator(text)
    known = {"experiment", "dataset", "backbone", "pretrain", "regimes", "eval", "output"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown section [{key}]", loc.find(key), source)

    exp = dict(raw.get("experiment", {}))
    name = str(exp.pop("name", "experiment"))
    seed = exp.pop("seed", 0)
    if exp:
        raise ConfigError(f"unknown key experiment.{sorted(exp)[0]}", loc.find("experiment", sorted(exp)[0]), source)
    if not isinstance(seed, int):
        raise ConfigError("experiment.seed must be an integer", loc.find("experiment", "seed"), source)

    ds = dict(raw.get("dataset", {}))
    spec_conv = {k: (lambda d, k=k: _take(d, SyntheticSpec, ("dataset", k), loc, source)) for k in ("target", "source")}
    dataset = _take(ds, DatasetConfig, ("dataset",), loc, source, convert=spec_conv)
    if dataset.kind not in ("synthetic", "manifest"):
        raise ConfigError("dataset.kind must be 'synthetic' or 'manifest'", loc.find("dataset", "kind"), source)
    if dataset.kind == "synthetic" and dataset.target is None:
        raise ConfigError("synthetic datasets need a [dataset.target] section", loc.find("dataset"), source)
    if dataset.kind == "manifest" and not dataset.manifest:
        raise ConfigError("manifest datasets need dataset.manifest", loc.find("dataset"), source)
    if not dataset.novel_max < dataset.val_max:
        raise ConfigError("dataset.novel_max must be < dataset.val_max", loc.find("dataset", "novel_max"), source)

    backbone = _take(dict(raw.get("backbone", {})), BackboneConfig, ("backbone",), loc, source)
    if backbone.kind not in ("identity", "linear", "toy-cnn"):
        raise ConfigError(f"backbone.kind {backbone.kind!r} cannot be trained from scratch", loc.find("backbone", "kind"), source)

    pre = dict(raw.get("pretrain", {}))
    pretrain = _take(
        pre,
        PretrainConfig,
        ("pretrain",),
        loc,
        source,
        convert={
            "conventional": lambda d: _take(d, ConventionalConfig, ("pretrain", "conventional"), loc, source),
            "optimizer": lambda d: _take(d, OptimizerConfig, ("pretrain", "optimizer"), loc, source),
            "aug": _aug,
        },
    )

    regimes: dict[str, RegimeConfig] = {}
    for rname, sec in raw.get("regimes", {}).items():
        sec = dict(sec)
        where = ("regimes", rname)
        sec.setdefault("regime", rname if rname in REGIMES else None)
        if sec["regime"] is None:
            raise ConfigError(f"[regimes.{rname}] needs regime = FEL|FETL|DTL|DL", loc.find(*where), source)
        sec.setdefault("init", "random" if sec["regime"] == "FEL" else "pretrained")
        sec["backbone"] = backbone
        sec["seed"] = seed
        regimes[rname] = _take(
            sec,
            RegimeConfig,
            where,
            loc,
            source,
            convert={
                "episodic": lambda d, w=where: _take(d, EpisodicConfig, w + ("episodic",), loc, source),
                "conventional": lambda d, w=where: _take(d, ConventionalConfig, w + ("conventional",), loc, source),
                "optimizer": lambda d, w=where: _take(d, OptimizerConfig, w + ("optimizer",), loc, source),
                "aug": _aug,
                "backbone": lambda b: b,
            },
        )
    if not regimes:
        raise ConfigError("at least one [regimes.<name>] section is required", None, source)

    ev = _take(dict(raw.get("eval", {})), EvalConfig, ("eval",), loc, source)
    if not ev.cells:
        raise ConfigError("eval.cells must list at least one cell", loc.find("eval", "cells"), source)
    for cell in ev.cells:
        try:
            parse_cell(cell)
        except ValueError as err:
            raise ConfigError(str(err), loc.find("eval", "cells"), source) from None
    if ev.query_mode not in QUERY_MODES or ev.distance not in DISTANCES:
        raise ConfigError("eval.query_mode or eval.distance has an unknown value", loc.find("eval"), source)

    out = _take(dict(raw.get("output", {})), OutputConfig, ("output",), loc, source)
    bad = set(out.formats) - set(TABLE_FORMATS)
    if bad or out.metric not in ("accuracy", "macro_f1"):
        raise ConfigError(f"output.formats must be within {TABLE_FORMATS}; metric accuracy|macro_f1", loc.find("output"), source)

    cfg = ExperimentConfig(name, seed, dataset, backbone, pretrain, regimes, ev, out, str(base_dir))
    if check_paths:
        for key, p in (("manifest", dataset.manifest), ("source_manifest", dataset.source_manifest)):
            if p and not cfg.resolve(p).is_file():
                raise ConfigError(f"dataset.{key} not found: {p}", loc.find("dataset", key), source)
        if pretrain.pretrained and not cfg.resolve(pretrain.pretrained).is_file():
            raise ConfigError(f"pretrain.pretrained not found: {pretrain.pretrained}", loc.find("pretrain", "pretrained"), source)
        for rname, r in regimes.items():
            if r.pretrained_path and not cfg.resolve(r.pretrained_path).is_file():
                raise ConfigError(f"pretrained_path not found: {r.pretrained_path}", loc.find("regimes", rname, "pretrained_path"), source)
    if dataset.kind == "synthetic" and cfg.needs_pretrained() and not pretrain.pretrained and dataset.source is None:
        raise ConfigError(
            "regimes other than FEL need [dataset.source] or pretrain.pretrained", loc.find("dataset"), source
        )
    return cfg


def load_config(path: str | Path, check_paths: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}", None, str(path)) from err
    return loads(text, base_dir=path.parent, source=str(path), check_paths=check_paths)


def with_overrides(cfg: ExperimentConfig, **eval_overrides) -> ExperimentConfig:
    return replace(cfg, eval=replace(cfg.eval, **eval_overrides))


def bundled_config_path(name: str = "synthetic") -> Path:
    from importlib.resources import files

    return Path(str(files("protoshot") / "configs" / f"{name}.toml"))
