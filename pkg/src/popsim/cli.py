"""Command-line entry point: ``popsim prepare|train|eval|replay|report``.

Exit codes: 0 success, 1 degraded (fallbacks fired), 2 user or config
error, 3 environment error (backend unreachable).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .backend import digest
from .config import ExperimentConfig, load_config
from .dataset import Bundle, DatasetSpec, load_bundle, prepare, write_bundle
from .errors import (
    BackendUnavailable,
    ConfigError,
    DatasetTooSmall,
    PopsimError,
    ReplayError,
    SnapshotError,
)
from .evaluation import evaluate, format_table, read_summaries, write_report
from .memory import SimState
from .simulation import Simulator, Trace, apply_trace, build_state

logger = logging.getLogger("popsim")

EXIT_OK, EXIT_DEGRADED, EXIT_USER, EXIT_ENV = 0, 1, 2, 3


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _interacted(bundle: Bundle) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    for r in bundle.all_interactions:
        out.setdefault(r.user, set()).add(r.item)
    return out


def _setup(args) -> tuple[ExperimentConfig, Bundle]:
    overrides = {
        "run.seed": args.seed, "run.variant": getattr(args, "variant", None),
        "run.dual_layer": getattr(args, "dual_layer", None),
        "run.shared_groups": getattr(args, "shared_groups", None),
        "run.group_by": getattr(args, "group_by", None),
        "backend.kind": args.backend, "backend.templates": args.templates,
        "backend.rules": getattr(args, "rules", None),
        "backend.cache": getattr(args, "cache", None),
        "output.dir": getattr(args, "out", None),
        "data.bundle": getattr(args, "bundle", None),
    }
    # command-line paths are relative to the working directory
    for key in ("backend.templates", "backend.rules", "backend.cache", "data.bundle"):
        if overrides[key]:
            overrides[key] = str(Path(overrides[key]).resolve())
    cfg = load_config(args.config, overrides)
    bundle_path = Path(cfg.bundle)
    if not (bundle_path / "spec.json").exists():
        raise FileNotFoundError(f"dataset bundle {bundle_path} not found")
    bundle = load_bundle(bundle_path)
    cfg.run.domains = list(bundle.spec.domains)
    cfg.run.validate()
    return cfg, bundle


# ------------------------------------------------------------------ prepare

def cmd_prepare(args) -> int:
    spec = DatasetSpec.from_file(args.spec)
    if args.input:
        spec.input = str(Path(args.input).resolve())
    if not spec.input or not Path(spec.input).exists():
        raise FileNotFoundError(f"input file {spec.input!r} not found")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} already exists; use --force to overwrite", file=sys.stderr)
        return EXIT_USER
    bundle = prepare(spec)
    write_bundle(bundle, out, force=args.force)
    print(json.dumps(bundle.manifest["sizes"]))
    return EXIT_OK


# -------------------------------------------------------------------- train

def cmd_train(args) -> int:
    cfg, bundle = _setup(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    backend = cfg.backend.build()
    config_digest = cfg.config_digest()
    header = {"config_digest": config_digest, "dataset_digest": bundle.digest(),
              "backend": backend.identity(), "variant": cfg.run.variant}
    trace_path, ckpt_path = out / "trace.jsonl", out / "checkpoint.ndjson"
    seg_path = out / "segmentation.jsonl"
    started = _now()

    if args.resume and ckpt_path.exists():
        state = SimState.restore(ckpt_path.read_text(encoding="utf-8"))
        if state.meta.get("config_digest") != config_digest:
            print("error: checkpoint was written under a different config", file=sys.stderr)
            return EXIT_USER
        step = state.meta.get("step", 0)
        Trace.truncate_file(trace_path, step)
        if seg_path.exists():
            keep = [ln for ln in seg_path.read_text(encoding="utf-8").splitlines()
                    if json.loads(ln)["epoch"] <= state.meta.get("epoch", 0)]
            seg_path.write_text("".join(ln + "\n" for ln in keep), encoding="utf-8")
        trace = Trace(trace_path, append=True)
        logger.info("resuming from step %d", step)
    else:
        users = {r.user for r in bundle.all_interactions}
        state = build_state(cfg.run, bundle.items.values(), users)
        state.meta["config_digest"] = config_digest
        trace = Trace(trace_path, header=header)
        seg_path.write_text("", encoding="utf-8")

    def checkpoint(st: SimState) -> None:
        _atomic_write(ckpt_path, st.snapshot())

    def log_segments(report: list[dict]) -> None:
        with seg_path.open("a", encoding="utf-8") as fh:
            for rec in report:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    sim = Simulator(state, backend, cfg.run, _interacted(bundle), trace,
                    checkpoint=checkpoint, segmentation_log=log_segments)
    try:
        sim.run(bundle.train)
        snap_digest = sim.finish()
    finally:
        trace.close()
    degraded = sim.degraded
    snapshot = state.snapshot()
    _atomic_write(out / "snapshot.ndjson", snapshot)
    checkpoint(state)
    ident = {"config_digest": config_digest, "dataset_digest": bundle.digest(),
             "seeds": {"run": cfg.run.seed, "eval": cfg.eval.seed},
             "backend": backend.identity()}
    manifest = {**ident, "manifest_digest": digest(ident), "variant": cfg.run.variant,
                "snapshot_digest": snap_digest, "started": started, "finished": _now(),
                "steps": state.meta.get("step", 0), "degraded": degraded,
                "version": __version__,
                "artifacts": {"trace": str(trace_path), "snapshot": str(out / "snapshot.ndjson"),
                              "checkpoint": str(ckpt_path), "segmentation": str(seg_path)}}
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"trained {manifest['steps']} steps; snapshot {snap_digest[:16]}; degraded {degraded}")
    return EXIT_DEGRADED if degraded else EXIT_OK


# --------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    cfg, bundle = _setup(args)
    snap = Path(args.snapshot)
    if not snap.exists():
        print(f"error: snapshot {snap} not found", file=sys.stderr)
        return EXIT_USER
    state = SimState.restore(snap.read_text(encoding="utf-8"))
    if args.runs is not None:
        cfg.eval.runs = args.runs
    if args.methods:
        cfg.eval.methods = tuple(args.methods.split(","))
    if cfg.eval.runs < 1:
        raise ConfigError("--runs must be >= 1")
    backend = cfg.backend.build()
    targets = bundle.test if cfg.eval.split == "test" else bundle.valid
    reports, runs = evaluate(state, backend, targets, _interacted(bundle), bundle.train, cfg.eval,
                             dataset=bundle.spec.name, agent_label=cfg.run.variant,
                             shared_view_size=cfg.run.shared_view_size,
                             self_echo=cfg.run.self_echo, budget=cfg.run.memory_budget)
    out = Path(args.report_dir or cfg.out_dir)
    jsonl, txt = write_report(out, reports, runs)
    print(txt.read_text(encoding="utf-8"), end="")
    degraded = any(r.degraded for r in reports)
    return EXIT_DEGRADED if degraded else EXIT_OK


# ------------------------------------------------------------------- replay

def read_trace(path: Path) -> list[dict]:
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ReplayError(f"{path}:{lineno}: unreadable record") from exc
    if not records or records[0].get("record") != "header":
        raise ReplayError("trace has no header")
    if records[-1].get("record") != "end":
        raise ReplayError("trace is truncated (no end record)")
    return records


def cmd_replay(args) -> int:
    cfg, bundle = _setup(args)
    records = read_trace(Path(args.trace))
    header, end = records[0], records[-1]
    if header["config_digest"] != cfg.config_digest():
        print("error: trace was recorded under a different config", file=sys.stderr)
        return EXIT_USER
    if header["dataset_digest"] != bundle.digest():
        print("error: trace was recorded on a different dataset", file=sys.stderr)
        return EXIT_USER
    users = {r.user for r in bundle.all_interactions}
    state = build_state(cfg.run, bundle.items.values(), users)
    state.meta["config_digest"] = header["config_digest"]
    apply_trace(state, records)
    got = state.digest()
    if args.out_snapshot:
        _atomic_write(Path(args.out_snapshot), state.snapshot())
    print(f"replayed snapshot {got}")
    if got != end["snapshot_digest"]:
        print(f"error: replay digest differs from recorded {end['snapshot_digest']}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


# ------------------------------------------------------------------- report

def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        p = Path(path)
        if p.is_dir():
            p = p / "report.jsonl"
        reports.extend(read_summaries(p))
    print(format_table(reports), end="")
    return EXIT_OK


# --------------------------------------------------------------------- main

def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="popsim", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ablation=True):
        sp.add_argument("--config", required=True)
        sp.add_argument("--bundle", help="override data.bundle")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--backend", choices=["live", "replay", "scripted"])
        sp.add_argument("--templates")
        sp.add_argument("--rules", help="scripted rules file")
        sp.add_argument("--cache", help="replay cache file")
        sp.add_argument("--out", help="output directory")
        if ablation:
            sp.add_argument("--variant")
            sp.add_argument("--dual-layer", type=_bool, dest="dual_layer")
            sp.add_argument("--shared-groups", type=_bool, dest="shared_groups")
            sp.add_argument("--group-by", choices=["interest", "history"], dest="group_by")

    sp = sub.add_parser("prepare", help="filter and split raw reviews into a bundle")
    sp.add_argument("spec")
    sp.add_argument("--input", help="override the spec's input file")
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="run the training simulation")
    common(sp)
    sp.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="rank candidates and report NDCG/MRR")
    common(sp)
    sp.add_argument("--snapshot", required=True)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--methods", help="comma-separated subset of agent,pop,seqsim,llmrank")
    sp.add_argument("--report-dir")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("replay", help="rebuild the final state from a trace")
    common(sp)
    sp.add_argument("--trace", required=True)
    sp.add_argument("--out-snapshot")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("report", help="print summary tables from report files")
    sp.add_argument("reports", nargs="+")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BackendUnavailable as exc:
        print(f"error: backend unavailable: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (ConfigError, DatasetTooSmall, SnapshotError, ReplayError, FileNotFoundError,
            FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except PopsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
