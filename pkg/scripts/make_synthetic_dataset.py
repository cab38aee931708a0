"""Write a seeded synthetic review file and spec, then prepare a bundle from it.

    python3 scripts/make_synthetic_dataset.py --out data/synthetic --preset cross-1
"""
import argparse
import json
from pathlib import Path

from popsim.dataset import CROSS_PRESETS, DatasetSpec, prepare, write_bundle
from popsim.synthetic import write_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/synthetic")
    ap.add_argument("--preset", default="cross-1", choices=sorted(CROSS_PRESETS))
    ap.add_argument("--users", type=int, default=150, help="users generated before filtering")
    ap.add_argument("--sample", type=int, default=100, help="users kept after filtering")
    ap.add_argument("--items-per-domain", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--force", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    spec_path = write_synthetic(out, name=f"synthetic-{args.preset}", preset=args.preset,
                                n_users=args.users, items_per_domain=args.items_per_domain,
                                user_sample_size=args.sample, seed=args.seed)
    bundle = prepare(DatasetSpec.from_file(spec_path))
    write_bundle(bundle, out / "bundle", force=args.force)
    print(json.dumps({"spec": str(spec_path), "bundle": str(out / "bundle"),
                      **bundle.manifest["sizes"]}))


if __name__ == "__main__":
    main()
