"""``protoshot`` command-line entry point.

Exit codes: 0 success, 1 usage, 2 configuration, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import tomli

from protoshot.binfmt import FormatError
from protoshot.config import ConfigError, TABLE_FORMATS, load_config, parse_cell
from protoshot.dataset import DatasetError, SyntheticSpec, generate_synthetic, load_manifest, save_manifest, split_longtail, write_partition
from protoshot.nn import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("protoshot")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which is our config code
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="protoshot", description="Few-shot prototypical-network benchmark toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic long-tail dataset and manifest")
    s.add_argument("--spec", required=True, help="TOML file with SyntheticSpec fields")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("split", help="partition a manifest's classes by size")
    s.add_argument("--manifest", required=True)
    s.add_argument("--novel-max", type=int, default=20)
    s.add_argument("--val-max", type=int, default=30)
    s.add_argument("--exclude", default="", help="comma-separated classes to drop")
    s.add_argument("--out", required=True, help="partition JSON path")

    s = sub.add_parser("pretrain", help="train the source-domain embedder")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")

    s = sub.add_parser("train", help="run one regime's trainer")
    s.add_argument("--config", required=True)
    s.add_argument("--regime", required=True, help="regime section name or FEL|FETL|DTL|DL")
    s.add_argument("--pretrained", help="pretrained checkpoint (default: pretrain on the fly)")
    s.add_argument("--out", required=True, help="checkpoint path")

    s = sub.add_parser("eval", help="episodic evaluation of a checkpoint on the novel classes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--cell", required=True, help="e.g. 5w5s")
    s.add_argument("--name", help="column name in the report (default: regime stored in the checkpoint)")
    s.add_argument("--out", required=True, help="report JSON path")

    s = sub.add_parser("sweep", help="train all regimes and evaluate every cell")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("report", help="assemble tables and shot curves from a report directory")
    s.add_argument("--dir", required=True)
    s.add_argument("--format", choices=TABLE_FORMATS, default="md")
    s.add_argument("--metric", choices=("accuracy", "macro_f1"), default="accuracy")
    return p


# --------------------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    try:
        raw = tomli.loads(Path(args.spec).read_text(encoding="utf-8"))
        raw = raw.get("synthetic", raw)
        spec = SyntheticSpec(**raw)
    except (OSError, tomli.TOMLDecodeError, TypeError, DatasetError) as err:
        raise ConfigError(str(err), path=args.spec) from err
    data = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(data, out / "manifest.csv")
    print(f"wrote {len(data)} examples in {len(data.classes)} classes to {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_split(args) -> int:
    data = load_manifest(args.manifest)
    exclude = [c.strip() for c in args.exclude.split(",") if c.strip()]
    part = split_longtail(data, args.novel_max, args.val_max, exclude)
    write_partition(part, args.out)
    print(
        f"base_train={len(part.base_train)} base_val={len(part.base_val)} novel={len(part.novel)} "
        f"excluded={len(part.excluded)} -> {args.out}"
    )
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from protoshot.experiment import load_data, obtain_pretrained

    cfg = load_config(args.config)
    e, plog = obtain_pretrained(cfg, load_data(cfg))
    save_checkpoint(e, args.out)
    if plog is not None:
        plog.write(Path(args.out).with_suffix(".jsonl"))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from protoshot.experiment import load_data, obtain_pretrained, resolve_regime, train_named

    cfg = load_config(args.config)
    try:
        name = resolve_regime(cfg, args.regime)
    except KeyError as err:
        raise ConfigError(str(err.args[0]), path=args.config) from err
    data = load_data(cfg)
    pretrained = None
    if cfg.regimes[name].regime != "FEL" and not cfg.regimes[name].pretrained_path:
        pretrained = load_checkpoint(args.pretrained) if args.pretrained else obtain_pretrained(cfg, data)[0]
    e, trainlog = train_named(cfg, name, data, pretrained)
    save_checkpoint(e, args.out)
    if trainlog is not None:
        trainlog.write(Path(args.out).with_suffix(".jsonl"))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from protoshot.experiment import eval_cell, load_data
    from protoshot.report import write_report

    cfg = load_config(args.config)
    try:
        parse_cell(args.cell)
    except ValueError as err:
        raise UsageError(str(err)) from err
    e = load_checkpoint(args.ckpt)
    name = args.name or e.meta.get("name") or e.meta.get("regime", "model")
    rep = eval_cell(cfg, name, e, load_data(cfg).novel, args.cell)
    write_report(rep, args.out)
    hw = "n/a" if rep.acc_half_width is None else f"{100 * rep.acc_half_width:.2f}"
    print(f"{name} {args.cell}: accuracy {100 * rep.acc_mean:.2f} ± {hw} ({rep.spec.episodes} episodes)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from protoshot.experiment import sweep

    cfg = load_config(args.config)
    result = sweep(cfg, args.out)
    print(f"{len(result.reports)} reports written under {args.out}")
    for regime, cell, msg in result.failures:
        print(f"FAILED {regime} {cell}: {msg}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUNTIME


def cmd_report(args) -> int:
    from protoshot.report import collect_reports, write_tables

    d = Path(args.dir)
    reports = collect_reports(d)
    columns = None
    meta = d / "sweep.json"
    if meta.is_file():
        present = {r.regime for r in reports}
        columns = [c for c in json.loads(meta.read_text(encoding="utf-8"))["columns"] if c in present]
        columns += sorted(present - set(columns))
    table = write_tables(reports, d, (args.format,), columns, args.metric)
    sys.stdout.write(table.render(args.format))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"protoshot: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError, FormatError, FloatingPointError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
