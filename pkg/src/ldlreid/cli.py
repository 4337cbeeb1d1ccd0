"""Command-line entry point: ``ldlreid {generate,train,eval,ablate,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .experiment import (
    ConfigError,
    ExperimentConfig,
    aggregate,
    evaluate_model,
    load_config,
    run_paired,
    train_config_for,
    write_json,
)
from .ldl_engine import DomainLayout, load_matrix, save_matrix, similarity_report
from .model import load_checkpoint, make_engine, save_checkpoint, train
from .synth_data import generate, load_dataset, save_dataset

log = logging.getLogger("ldlreid")

RESULT_COLUMNS = ("variant", "seed", "map", "rank1", "rank5", "rank10", "gap_ratio", "mean_similarity", "mean_diff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _meta() -> dict:
    return {"created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}


# --------------------------------------------------------------------------
# paths
# --------------------------------------------------------------------------

def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.output_dir / "data"


def run_dir(cfg: ExperimentConfig, variant: str, seed: int) -> Path:
    return cfg.output_dir / "runs" / variant / f"seed-{seed}"


def _prepare_dir(path: Path, force: bool, marker: str) -> None:
    if (path / marker).exists() and not force:
        raise UsageError(f"{path / marker} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _load_data(cfg: ExperimentConfig):
    ddir = data_dir(cfg)
    manifest_path = ddir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{manifest_path} not found; run 'generate' first")
    manifest = json.loads(manifest_path.read_text())
    layout = DomainLayout(manifest["layout"]["phi"], manifest["layout"]["domain_count"])
    source = load_dataset(ddir / "source.csv", layout)
    target = load_dataset(ddir / "target.csv")
    return source, target, manifest


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, force: bool = False) -> Path:
    ddir = data_dir(cfg)
    _prepare_dir(ddir, force, "manifest.json")
    source, target = generate(cfg.spec)
    save_dataset(ddir / "source.csv", source)
    save_dataset(ddir / "target.csv", target)
    doc = {
        "schema_version": 1,
        "spec": cfg.spec.to_dict(),
        "layout": source.layout.to_dict(),
        "source_classes_per_domain": list(source.layout.counts),
        "target_class_count": int(np.unique(target.class_ids).size),
        "source_samples": len(source),
        "target_samples": len(target),
        "meta": _meta(),
    }
    write_json(ddir / "manifest.json", doc, "manifest")
    log.info("wrote %d source and %d target samples to %s", len(source), len(target), ddir)
    return ddir


def _history_doc(variant, seed, train_cfg, history, engine) -> dict:
    final = {}
    if engine is not None:
        rows = similarity_report(engine.tracking, engine.layout)
        final = {
            "mean_similarity": float(np.mean([v for r in rows for v in r.similarities.values()])),
            "mean_diff": float(np.mean([r.diff for r in rows])),
        }
    return {
        "schema_version": 1,
        "variant": variant,
        "seed": seed,
        "config": train_cfg.to_dict(),
        "epochs": history,
        "final": final,
        "meta": _meta(),
    }


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> list[Path]:
    source, target, _ = _load_data(cfg)
    written = []
    for variant in cfg.train_variants():
        for seed in cfg.run_seeds():
            rdir = run_dir(cfg, variant, seed)
            _prepare_dir(rdir, force, "checkpoint.json")
            tc = train_config_for(cfg.train, variant, seed)
            engine = make_engine(tc, source)
            params, history = train(tc, source, engine)
            save_checkpoint(rdir / "checkpoint.json", params, {"variant": variant, "seed": seed})
            write_json(rdir / "history.json", _history_doc(variant, seed, tc, history, engine), "history")
            if engine is not None:
                save_matrix(rdir / "tracking.csv", engine.tracking, engine.layout, "tracking", engine.committed_epoch)
                save_matrix(rdir / "label_dist.csv", engine.label_dist, engine.layout, "label_distribution",
                            engine.committed_epoch)
            log.info("trained %s seed %d -> %s", variant, seed, rdir)
            written.append(rdir)
    return written


def _report_doc(report, variant, seed) -> dict:
    doc = report.to_json()
    doc["context"].update(variant=variant, seed=seed)
    doc["meta"] = _meta()
    return doc


def cmd_eval(cfg: ExperimentConfig) -> list[Path]:
    source, target, _ = _load_data(cfg)
    written = []
    for variant in cfg.train_variants():
        for seed in cfg.run_seeds():
            rdir = run_dir(cfg, variant, seed)
            ckpt = rdir / "checkpoint.json"
            if not ckpt.exists():
                raise FileNotFoundError(f"{ckpt} not found; run 'train' first")
            params, _ = load_checkpoint(ckpt)
            report, per_source = evaluate_model(params, source, target, cfg.metric, cfg.source_eval)
            path = rdir / "report_target.json"
            write_json(path, _report_doc(report, variant, seed), "eval_report")
            written.append(path)
            for d, rep in per_source.items():
                path = rdir / f"report_source-{d}.json"
                write_json(path, _report_doc(rep, variant, seed), "eval_report")
                written.append(path)
            log.info("%s seed %d: target mAP %.4f rank-1 %.4f", variant, seed, report.map, report.cmc[1])
    return written


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def similarity_rows(engine, variant: str) -> list[dict]:
    """Per-class cross-domain similarities in the layout of the label-assignment table."""
    out = []
    for r in similarity_report(engine.tracking, engine.layout):
        row = {"variant": variant, "class_id": r.class_id, "domain_id": r.domain_id, "diff": r.diff}
        for n, d in enumerate(sorted(r.similarities), 1):
            row[f"OD-{n}"] = r.similarities[d]
        out.append(row)
    return out


def cmd_ablate(cfg: ExperimentConfig, force: bool = False) -> Path:
    variants = cfg.train_variants()
    if len(variants) < 2:
        raise UsageError("ablate needs at least two variants")
    adir = cfg.output_dir / "ablation"
    _prepare_dir(adir, force, "results.json")
    rows, sim_rows = [], []
    for seed in cfg.run_seeds():
        runs = run_paired(cfg, seed, variants)
        for v in variants:
            rows.append(runs[v].summary())
            if v in ("baseline", "LDL-3") and runs[v].engine is not None:
                for r in similarity_rows(runs[v].engine, v):
                    sim_rows.append(dict(r, seed=seed))
        log.info("seed %d: %s", seed, ", ".join(f"{v} mAP {runs[v].target_report.map:.4f}" for v in variants))
    agg = aggregate(rows)
    _write_csv(adir / "results.csv", rows + agg, RESULT_COLUMNS)
    od_cols = sorted({k for r in sim_rows for k in r if k.startswith("OD-")}, key=lambda k: int(k[3:]))
    _write_csv(adir / "similarity.csv", sim_rows, ["variant", "seed", "class_id", "domain_id", *od_cols, "diff"])

    sweep_rows = []
    for name, values, key in (("m", cfg.sweep_m, "momentum_m"), ("lambda", cfg.sweep_lambda, "lam")):
        for value in values:
            for seed in cfg.run_seeds():
                run = run_paired(cfg, seed, ["LDL-3"], **{key: value})["LDL-3"]
                sweep_rows.append({"param": name, "value": value, "seed": seed,
                                   "map": run.target_report.map, "rank1": run.target_report.cmc[1]})
    if sweep_rows:
        _write_csv(adir / "sweep.csv", sweep_rows, ("param", "value", "seed", "map", "rank1"))

    doc = {
        "schema_version": 1,
        "config": cfg.snapshot(),
        "runs": rows,
        "aggregate": agg,
        "sweep": sweep_rows,
        "meta": _meta(),
    }
    write_json(adir / "results.json", doc, "ablation")
    print(format_table(agg))
    return adir


def format_table(agg: list[dict]) -> str:
    lines = [f"{'variant':10s} {'mAP':>16s} {'rank-1':>16s} {'gap ratio':>16s} {'diff':>18s}"]
    means = [r for r in agg if r["seed"] == "mean"]
    stds = {r["variant"]: r for r in agg if r["seed"] == "std"}
    for r in means:
        s = stds[r["variant"]]

        def cell(k, prec=4):
            if r.get(k) is None:
                return f"{'-':>16s}"
            return f"{r[k]:.{prec}f}±{s[k]:.{prec}f}".rjust(16)

        lines.append(f"{r['variant']:10s} {cell('map')} {cell('rank1')} {cell('gap_ratio', 3)} {cell('mean_diff', 5)}")
    return "\n".join(lines)


def cmd_report(cfg: ExperimentConfig, matrix: Path | None = None, out: Path | None = None) -> str:
    if matrix is not None:
        tracking, layout, _ = load_matrix(matrix)
        rows = [{"class_id": r.class_id, "domain_id": r.domain_id, "diff": r.diff,
                 **{f"OD-{n}": r.similarities[d] for n, d in enumerate(sorted(r.similarities), 1)}}
                for r in similarity_report(tracking, layout)]
        od = [f"OD-{n}" for n in range(1, layout.domain_count)]
        lines = ["class domain " + " ".join(f"{c:>12s}" for c in od) + f" {'Diff':>12s}"]
        for r in rows:
            lines.append(f"{r['class_id']:5d} {r['domain_id']:6d} " + " ".join(f"{r[c]:12.6g}" for c in od)
                         + f" {r['diff']:12.6g}")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            _write_csv(out / "similarity_report.csv", rows, ["class_id", "domain_id", *od, "diff"])
        return "\n".join(lines)
    results = cfg.output_dir / "ablation" / "results.json"
    if not results.exists():
        raise FileNotFoundError(f"{results} not found; run 'ablate' or pass --matrix")
    return format_table(json.loads(results.read_text())["aggregate"])


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--variant", action="append", help="variant name (repeatable)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ldlreid", description="Label-distribution learning for multi-source retrieval.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    sub.add_parser("train", parents=[common], help="train every variant and seed")
    p_eval = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    p_eval.add_argument("--source-eval", action="store_true", help="also evaluate on each source domain")
    sub.add_parser("ablate", parents=[common], help="paired variant comparison over seeds")
    p_rep = sub.add_parser("report", parents=[common], help="print summary or similarity tables")
    p_rep.add_argument("--matrix", type=Path, help="tracking matrix CSV for the similarity/Diff table")
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.variant:
        overrides["variants"] = ",".join(args.variant)
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    if getattr(args, "source_eval", False):
        overrides["source_eval"] = "true"
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"ldlreid: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "generate":
            cmd_generate(cfg, args.force)
        elif args.command == "train":
            cmd_train(cfg, args.force)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.force)
        elif args.command == "report":
            print(cmd_report(cfg, args.matrix, args.out))
    except UsageError as exc:
        print(f"ldlreid: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"ldlreid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
