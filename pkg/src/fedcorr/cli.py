"""Command-line entry point: ``fedcorr run | validate-config | export-dataset``.

Every config key is also a flag (``n_clients`` -> ``--n-clients``) whose value
overrides the file. ``FEDCORR_OUTPUT_DIR`` overrides ``output_dir`` from the
file; an explicit ``--output-dir`` flag wins over both.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, apply_overrides, load_config
from .errors import ConfigError, FedCorrError
from .io import export_csv
from .protocol import ExperimentResult, build_federation, run_fedavg, run_fedcorr

OUTPUT_ENV = "FEDCORR_OUTPUT_DIR"
log = logging.getLogger("fedcorr")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _parse_optional_int(text: str):
    return None if text.strip().lower() in ("none", "null", "") else int(text)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            kind = _parse_bool
        elif f.name == "fedavg_rounds":
            kind = _parse_optional_int
        elif isinstance(f.default, int):
            kind = int
        elif isinstance(f.default, float):
            kind = float
        else:
            kind = str
        group.add_argument(flag, dest=f"cfg_{f.name}", type=kind, default=argparse.SUPPRESS,
                           metavar=f.name.upper())


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig().validate()
    overrides = {}
    env_dir = os.environ.get(OUTPUT_ENV)
    if env_dir:
        overrides["output_dir"] = env_dir
    overrides.update({k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")})
    return apply_overrides(cfg, overrides) if overrides else cfg


def _header(cfg: ExperimentConfig) -> str:
    return f"# seed={cfg.seed} config_hash={cfg.config_hash()}\n"


def _write_csv(path: Path, cfg: ExperimentConfig, rows: list[dict], columns: list[str]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(_header(cfg))
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def _json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"not serialisable: {type(obj).__name__}")


def summary_dict(cfg: ExperimentConfig, result: ExperimentResult) -> dict:
    out = {
        "mode": result.mode,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "final_accuracy": result.final_accuracy,
        "best_accuracy": result.best_accuracy,
        "n_rounds": len(result.rounds),
        "comm_cost": result.comm_cost,
        "true_noise_levels": result.true_noise_levels,
        "wall_clock_seconds": result.wall_clock,
    }
    if result.mode == "fedcorr":
        out.update(
            estimated_noise=result.estimated_noise,
            noisy_clients_detected=result.noisy_clients_detected,
            clean_set_size=result.clean_set_size,
            mean_noise_by_checkpoint={
                name: float(np.mean([c.noise_by_checkpoint[name] for c in result.relabel_report.clients]))
                for name in result.label_checkpoints
            },
        )
    return out


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult, out_dir: Path) -> list[Path]:
    """Write all result files into ``out_dir`` and return their paths."""
    written = []
    meta = {"seed": cfg.seed, "config_hash": cfg.config_hash()}

    p = out_dir / "resolved_config.json"
    _json(p, {**cfg.to_dict(), "_meta": meta})
    written.append(p)

    p = out_dir / "summary.json"
    _json(p, summary_dict(cfg, result))
    written.append(p)

    p = out_dir / "accuracy.csv"
    _write_csv(p, cfg, [dataclasses.asdict(r) for r in result.rounds],
               ["round", "stage", "n_selected", "comm_cost", "accuracy"])
    written.append(p)

    if result.mode != "fedcorr":
        return written

    p = out_dir / "client_states.csv"
    _write_csv(p, cfg, result.client_snapshots,
               ["iteration", "client", "lid", "cumulative_lid", "estimated_noise", "is_noisy", "true_noise"])
    written.append(p)

    rows = result.relabel_report.rows()
    p = out_dir / "relabel_report.csv"
    _write_csv(p, cfg, rows, list(rows[0]))
    written.append(p)

    p = out_dir / "relabel_log.csv"
    _write_csv(p, cfg, result.relabel_log, ["stage", "iteration", "client", "n_selected", "n_changed"])
    written.append(p)

    pooled = result.relabel_report.pooled
    p = out_dir / "confusion.json"
    _json(p, {**meta, "rows": "true class", "columns": "observed label",
              "matrices": result.confusion,
              "pooled_detection": {"tp": pooled.tp, "fp": pooled.fp, "tn": pooled.tn, "fn": pooled.fn,
                                   "precision": pooled.precision, "recall": pooled.recall,
                                   "precision_undefined": pooled.precision_undefined}})
    written.append(p)
    return written


def execute(cfg: ExperimentConfig, dry_run: bool = False) -> ExperimentResult:
    runner = run_fedcorr if cfg.mode == "fedcorr" else run_fedavg
    return runner(cfg, dry_run=dry_run)


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg.output_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=".fedcorr-", dir=out_dir.parent))
    try:
        result = execute(cfg, dry_run=args.dry_run)
        files = write_outputs(cfg, result, staging)
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in files:
            os.replace(f, out_dir / f.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    acc = result.final_accuracy
    print(f"{cfg.mode}: comm_cost={result.comm_cost} final_accuracy="
          f"{'n/a' if acc is None else f'{acc:.4f}'} -> {out_dir}")
    return 0


def cmd_validate(args) -> int:
    cfg = resolve_config(args)
    print(json.dumps({**cfg.to_dict(), "_meta": {"seed": cfg.seed, "config_hash": cfg.config_hash()}},
                     indent=2, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    cfg = resolve_config(args)
    fed = build_federation(cfg, dry_run=True)
    data = fed.train if args.split == "train" else fed.test
    export_csv(data, args.out, header=not args.no_header, labels=args.labels)
    print(f"wrote {len(data)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcorr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write result files")
    p.add_argument("config", nargs="?", help="JSON config file (omit for defaults)")
    p.add_argument("--dry-run", action="store_true", help="schedule rounds and count cost without training")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate-config", help="print the fully resolved config")
    p.add_argument("config", nargs="?")
    _add_config_flags(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("export-dataset", help="write the configured dataset as CSV")
    p.add_argument("config", nargs="?")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--labels", choices=["true", "given"], default="true",
                   help="which label column to write (given = after noise injection)")
    p.add_argument("--no-header", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedCorrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
