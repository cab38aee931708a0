"""Re-record the frozen golden-run digests in tests/golden/expected.json.

Run only after an intended change to prompts, rules, the golden data or the
simulation loop; commit the new file together with that change.
"""
import argparse
import hashlib
import json
import tempfile
from pathlib import Path

from popsim import cli
from popsim.config import EXAMPLE_CONFIG

ROOT = Path(__file__).resolve().parents[1]
EXPECTED = ROOT / "tests" / "golden" / "expected.json"


def golden_run(out_dir: Path) -> dict:
    rc = cli.main(["train", "--config", str(EXAMPLE_CONFIG), "--out", str(out_dir)])
    if rc != 0:
        raise SystemExit(f"golden run exited with {rc}")
    manifest = json.loads((out_dir / "manifest.json").read_text())
    return {
        "snapshot_sha256": hashlib.sha256((out_dir / "snapshot.ndjson").read_bytes()).hexdigest(),
        "trace_sha256": hashlib.sha256((out_dir / "trace.jsonl").read_bytes()).hexdigest(),
        "snapshot_digest": manifest["snapshot_digest"],
        "manifest_digest": manifest["manifest_digest"],
        "steps": manifest["steps"],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--check", action="store_true", help="compare instead of writing")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        got = golden_run(Path(tmp) / "run")
    if args.check:
        want = json.loads(EXPECTED.read_text())
        print("match" if got == want else f"MISMATCH\nwant {want}\ngot  {got}")
        raise SystemExit(0 if got == want else 1)
    EXPECTED.parent.mkdir(parents=True, exist_ok=True)
    EXPECTED.write_text(json.dumps(got, indent=2, sort_keys=True) + "\n")
    print(f"wrote {EXPECTED}")


if __name__ == "__main__":
    main()
