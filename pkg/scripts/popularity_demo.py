"""Show how a passive user's decision context moves with other users' purchases.

Alice buys hiking boots at t1 and nothing afterwards; Bob and Carl go on to
buy rain gear (t2) and a tent (t3). With group-shared memories Alice's context
picks this up; the single-memory variant leaves it frozen.
"""
import argparse

from popsim.simulation import VARIANTS, rain_gear_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variants", default="agentcf,agentcf++")
    args = ap.parse_args()
    for variant in args.variants.split(","):
        if variant not in VARIANTS:
            raise SystemExit(f"unknown variant {variant!r}")
        contexts = rain_gear_scenario(variant)
        print(f"== {variant}")
        for t in sorted(contexts):
            ctx = contexts[t]
            changed = "" if t == min(contexts) else (
                "  (unchanged)" if ctx == contexts[min(contexts)] else "  (changed)")
            print(f"-- after t{t}{changed}")
            print(f"   own memory: {ctx.separated or '(empty)'}")
            for line in ctx.shared_text().splitlines():
                print(f"   {line}")
        print()


if __name__ == "__main__":
    main()
