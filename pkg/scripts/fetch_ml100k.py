"""Fetch MovieLens-100K as ``data/ml-100k.tsv`` (user, item, rating, timestamp).

The RecBole wheel on PyPI ships the atomic ``ml-100k.inter`` file; this
script downloads that wheel with pip (or reads one given via ``--wheel``) and
converts the file to plain TSV. MovieLens data is subject to the GroupLens
usage license and is therefore not committed to this repository.
"""

import argparse
import glob
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--wheel", help="path to an already downloaded recbole wheel")
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "data" / "ml-100k.tsv"))
    args = ap.parse_args()

    wheel = args.wheel
    if wheel is None:
        tmp = tempfile.mkdtemp()
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--timeout", "120", "-d", tmp, "recbole==1.2.1"],
            check=True,
        )
        wheel = glob.glob(f"{tmp}/recbole-*.whl")[0]
    with zipfile.ZipFile(wheel) as zf:
        text = io.TextIOWrapper(zf.open(MEMBER), encoding="utf-8").read().splitlines()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # first line is the RecBole header (user_id:token ...)
    out.write_text("\n".join(text[1:]) + "\n", encoding="utf-8")
    print(f"wrote {len(text) - 1} interactions to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
