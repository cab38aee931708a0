"""Train and evaluate every variant on one bundle and print a combined table.

    python3 scripts/run_ablation.py --config cfg.yaml --bundle data/synthetic/bundle --out runs/ablation

Without --config the shipped example config is used with the generic scripted
rules, which exercises the whole pipeline offline (the numbers are then
plumbing checks, not model quality).
"""
import argparse
import sys
from pathlib import Path

from popsim import cli
from popsim.backend import DEFAULT_RULES
from popsim.config import EXAMPLE_CONFIG
from popsim.evaluation import format_table, read_summaries
from popsim.simulation import VARIANTS

BASELINES = ("pop", "seqsim", "llmrank")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(EXAMPLE_CONFIG))
    ap.add_argument("--bundle", required=True)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--variants", default=",".join(VARIANTS))
    ap.add_argument("--rules", help="scripted rules; default: the shipped generic rules")
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--config", args.config, "--bundle", args.bundle, "--seed", str(args.seed)]
    if args.rules:
        common += ["--rules", args.rules]
    elif args.config == str(EXAMPLE_CONFIG):
        common += ["--rules", str(DEFAULT_RULES)]
    reports = []
    for n, variant in enumerate(args.variants.split(",")):
        run_dir = out / variant.replace("+", "p")
        methods = "agent," + ",".join(BASELINES) if n == 0 else "agent"
        rc = cli.main(["train", *common, "--variant", variant, "--out", str(run_dir)])
        if rc not in (0, 1):
            sys.exit(rc)
        rc = cli.main(["eval", *common, "--variant", variant, "--out", str(run_dir),
                       "--snapshot", str(run_dir / "snapshot.ndjson"), "--runs", str(args.runs),
                       "--methods", methods])
        if rc not in (0, 1):
            sys.exit(rc)
        reports.extend(read_summaries(run_dir / "report.jsonl"))
    table = format_table(reports)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")


if __name__ == "__main__":
    main()
