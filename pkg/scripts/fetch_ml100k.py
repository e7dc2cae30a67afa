"""Materialize MovieLens-100K ``u.data`` / ``u.user`` from a PyPI wheel.

GroupLens' own host is often unreachable from build sandboxes, but the
``recbole`` wheel ships the full ML-100K interaction and user tables as
package data.  This script downloads that wheel (no install), and rewrites
the two tables into the original MovieLens file layouts.

    python scripts/fetch_ml100k.py --out data/ml-100k
"""

import argparse
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

WHEEL_SPEC = "recbole==1.2.1"
PREFIX = "recbole/dataset_example/ml-100k/ml-100k"


def _rows(zf: zipfile.ZipFile, suffix: str) -> list[list[str]]:
    lines = zf.read(f"{PREFIX}.{suffix}").decode("utf-8").splitlines()
    return [ln.split("\t") for ln in lines[1:] if ln.strip()]


def fetch(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", WHEEL_SPEC, "--no-deps",
             "-q", "-d", tmp],
            check=True,
        )
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            inter = _rows(zf, "inter")
            users = _rows(zf, "user")
    with open(out / "u.data", "w") as fh:
        for u, i, r, ts in inter:
            fh.write(f"{u}\t{i}\t{int(float(r))}\t{int(float(ts))}\n")
    with open(out / "u.user", "w") as fh:
        for row in users:
            fh.write("|".join(row) + "\n")
    print(f"wrote {len(inter)} ratings and {len(users)} users to {out}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data/ml-100k"))
    fetch(ap.parse_args().out)


if __name__ == "__main__":
    main()
