#!/usr/bin/env python3
"""Plot the tables written by `d2l report` (needs pandas and matplotlib)."""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402


def read_versioned(path):
    with open(path) as f:
        tag, version = f.readline().strip().split(",")
    if tag != "schema_version" or version != "1":
        raise SystemExit(f"{path}: unsupported schema {tag}={version}")
    return pd.read_csv(path, skiprows=1)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("report_dir", type=Path)
    ap.add_argument("--out", type=Path, default=None)
    args = ap.parse_args()
    out = args.out or args.report_dir

    acc = read_versioned(args.report_dir / "accuracy_vs_length.csv").set_index("length")
    mem = read_versioned(args.report_dir / "latency_memory.csv")

    fig, (top, bottom) = plt.subplots(2, 1, figsize=(7, 7), sharex=True)
    for col in acc.columns:
        s = acc[col].dropna()
        top.plot(s.index, s.values, marker="o", label=col)
    top.set_ylabel("exact match")
    top.set_ylim(-0.05, 1.05)
    top.legend(fontsize=7)
    for method, g in mem.groupby("method"):
        bottom.plot(g["length"], g["inference_footprint_bytes"] / 1024, marker=".", label=method)
    bottom.set_xscale("log", base=2)
    bottom.set_xlabel("haystack length (tokens)")
    bottom.set_ylabel("inference footprint (KiB)")
    fig.tight_layout()
    fig.savefig(out / "niah.png", dpi=150)
    print(out / "niah.png")


if __name__ == "__main__":
    main()
