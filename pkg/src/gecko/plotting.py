"""PNG figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def figure_path(csv_path, suffix=""):
    p = Path(csv_path)
    return p.with_name(p.stem + suffix + ".png")


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_bench(rows, csv_path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for pattern in sorted({r["pattern"] for r in rows}):
        pts = sorted((r["seq_len"], r["median_ns"] / 1e6) for r in rows if r["pattern"] == pattern)
        ax.plot(*zip(*pts), marker="o", label=pattern)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("sequence length")
    ax.set_ylabel("median time (ms)")
    ax.legend()
    return _save(fig, figure_path(csv_path))


def plot_train(rows, csv_path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["step"] for r in rows], [r["loss"] for r in rows])
    ax.set_xlabel("step")
    ax.set_ylabel("loss (nats)")
    ax.set_yscale("log")
    return _save(fig, figure_path(csv_path))


def plot_eval(pos_rows, bucket_rows, csv_path, chunk=None):
    fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))
    pts = [(r["position"], r["nll"]) for r in pos_rows if r["nll"] != ""]
    a.plot(*zip(*pts), lw=0.8)
    if chunk:
        for x in range(chunk, len(pos_rows), chunk):
            a.axvline(x, color="0.85", lw=0.5, zorder=0)
    a.set_xlabel("token position")
    a.set_ylabel("mean NLL (nats)")
    b.plot([r["context"] for r in bucket_rows], [r["ppl"] for r in bucket_rows], marker="o")
    b.set_xscale("log", base=2)
    b.set_xlabel("context length")
    b.set_ylabel("perplexity")
    return _save(fig, figure_path(csv_path))


def plot_recall(rows, csv_path):
    fig, ax = plt.subplots(figsize=(5, 4))
    d = [r["distance_chunks"] for r in rows]
    ax.plot(d, [r["accuracy"] for r in rows], marker="o", label="model")
    ax.plot(d, [r["chance"] for r in rows], ls="--", color="0.5", label="chance")
    ax.set_xscale("log", base=2)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("distance (chunks)")
    ax.set_ylabel("accuracy")
    ax.legend()
    return _save(fig, figure_path(csv_path))
