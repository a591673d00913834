"""Report figures rendered next to the delimited output.

Four PNGs: TTFT CDF, inter-token-latency CDF, cumulative emitted tokens
over time, and per-instance utilization. All inputs come from the
per-request rows and the instance stats, so the figures can be rebuilt
from a written report directory without re-running anything.
"""

from __future__ import annotations

import os
from typing import Any

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend pinned first)
import numpy as np  # noqa: E402


def _cdf_axes(ax, samples_ms: list[float], label: str) -> None:
    if not samples_ms:
        ax.text(0.5, 0.5, "no samples", ha="center", va="center",
                transform=ax.transAxes)
        return
    xs = np.sort(np.asarray(samples_ms))
    ys = np.arange(1, len(xs) + 1) / len(xs)
    ax.step(xs, ys, where="post")
    ax.set_xlabel(f"{label} (ms)")
    ax.set_ylabel("fraction of samples")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)


def _token_times(rows: list[dict[str, Any]]) -> list[int]:
    times: list[int] = []
    for row in rows:
        times.extend(int(t) for t in str(row["token_times_us"]).split())
    return sorted(times)


def _itl_samples(rows: list[dict[str, Any]]) -> list[float]:
    gaps: list[float] = []
    for row in rows:
        ts = [int(t) for t in str(row["token_times_us"]).split()]
        gaps.extend(float(b - a) for a, b in zip(ts, ts[1:]))
    return gaps


def render_plots(rows: list[dict[str, Any]], instances: dict[str, Any],
                 out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(6, 4))
    _cdf_axes(ax, [float(r["ttft_us"]) / 1e3 for r in rows],
              "time to first token")
    ax.set_title("TTFT distribution")
    path = os.path.join(out_dir, "ttft_cdf.png")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    _cdf_axes(ax, [g / 1e3 for g in _itl_samples(rows)], "inter-token latency")
    ax.set_title("ITL distribution")
    path = os.path.join(out_dir, "itl_cdf.png")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    times = _token_times(rows)
    if times:
        xs = np.asarray(times) / 1e6
        ax.step(xs, np.arange(1, len(xs) + 1), where="post")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("tokens emitted")
    ax.set_title("Cumulative output tokens")
    ax.grid(True, alpha=0.3)
    path = os.path.join(out_dir, "tokens_timeline.png")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    names = sorted(instances)
    utils = [float(instances[n].get("utilization", 0.0)) for n in names]
    if names:
        ax.bar(range(len(names)), utils, color="tab:blue")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("busy fraction over the run")
    ax.set_ylim(0.0, 1.05)
    ax.set_title("Instance utilization")
    ax.grid(True, axis="y", alpha=0.3)
    path = os.path.join(out_dir, "utilization.png")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
    written.append(path)
    return written
