"""Score reports, training logs and benchmark summaries: CSV plus figures.

Every report path writes machine-readable CSV and renders a matplotlib
figure next to it (same stem, .png), so batch evaluations are auditable at
a glance.  Score rows carry qw, qe, their product and the two MSE columns;
the aggregate row holds arithmetic means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import EdgeConfig, WindowConfig, luminance, mse, qe, qw


@dataclass
class ScoreRow:
    name: str
    qw: float
    qe: float
    qw_qe: float
    mse_vis: float
    mse_ir: float


@dataclass
class ScoreReport:
    rows: list

    def mean_row(self):
        """Arithmetic means; the product column is mean(qw) * mean(qe) so the
        per-row product invariant holds for the aggregate too."""
        if not self.rows:
            raise ValueError("empty score report")
        cols = np.array([[r.qw, r.qe, r.mse_vis, r.mse_ir] for r in self.rows])
        qw_m, qe_m, mse_vis_m, mse_ir_m = (float(v) for v in cols.mean(axis=0))
        return ScoreRow("mean", qw_m, qe_m, qw_m * qe_m, mse_vis_m, mse_ir_m)


def score_triple(name, vis, ir, fused, window_cfg=None, edge_cfg=None,
                 color_mode="luminance"):
    """One report row for an aligned (visible, infrared, fused) triple.

    ``color_mode`` picks how the quality indices treat color: "luminance"
    (default) compares luminances, "per-channel" averages the indices over
    the three RGB channel pairs.  mse_vis always spans the RGB channels and
    mse_ir compares the infrared channel against the fused luminance.
    """
    window_cfg = window_cfg or WindowConfig()
    edge_cfg = edge_cfg or EdgeConfig()
    vis = np.asarray(vis, dtype=np.float64)
    fused = np.asarray(fused, dtype=np.float64)
    b = np.asarray(ir, dtype=np.float64)[0]
    if color_mode == "luminance":
        pairs = [(luminance(vis), luminance(fused))]
    elif color_mode == "per-channel":
        pairs = [(vis[c], fused[c]) for c in range(3)]
    else:
        raise ValueError(f"unknown color_mode {color_mode!r}")
    row_qw = float(np.mean([qw(a, b, f, window_cfg) for a, f in pairs]))
    row_qe = float(np.mean([qe(a, b, f, window_cfg, edge_cfg) for a, f in pairs]))
    return ScoreRow(
        name=name,
        qw=row_qw,
        qe=row_qe,
        qw_qe=row_qw * row_qe,
        mse_vis=mse(vis, fused),
        mse_ir=mse(b, luminance(fused)),
    )


def figure_path(csv_path):
    return str(Path(csv_path).with_suffix(".png"))


def write_score_csv(report, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "qw", "qe", "qw_qe", "mse_vis", "mse_ir"])
        for row in report.rows + [report.mean_row()]:
            writer.writerow([row.name] + [f"{v:.6f}" for v in
                                          (row.qw, row.qe, row.qw_qe, row.mse_vis, row.mse_ir)])


def render_score_figure(report, path):
    names = [r.name for r in report.rows]
    qws = [r.qw for r in report.rows]
    qes = [r.qe for r in report.rows]
    mean = report.mean_row()
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.55 * len(names) + 2.0), 4.0))
    ax.bar(x - 0.2, qws, width=0.4, label="qw", color="#3465a4")
    ax.bar(x + 0.2, qes, width=0.4, label="qe", color="#cc8b2d")
    ax.axhline(mean.qw, color="#3465a4", ls="--", lw=1, alpha=0.7,
               label=f"mean qw = {mean.qw:.4f}")
    ax.axhline(mean.qe, color="#cc8b2d", ls="--", lw=1, alpha=0.7,
               label=f"mean qe = {mean.qe:.4f}")
    ax.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("index value")
    ax.set_title("fusion quality per image pair")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_training_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "loss", "heldout_qw", "heldout_qe"])
        for r in rows:
            writer.writerow([r.epoch, f"{r.lr:.8f}", f"{r.loss:.8f}",
                             f"{r.heldout_qw:.6f}", f"{r.heldout_qe:.6f}"])


def render_training_figure(rows, path):
    epochs = [r.epoch for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7.0, 6.0), sharex=True)
    ax1.plot(epochs, [r.loss for r in rows], marker="o", ms=3, color="#a40000",
             label="train loss")
    ax1.set_ylabel("loss")
    ax1.legend(loc="upper right", fontsize=8)
    ax1b = ax1.twinx()
    ax1b.step(epochs, [r.lr for r in rows], where="post", color="#555555",
              lw=1, alpha=0.7)
    ax1b.set_ylabel("learning rate", color="#555555")
    ax1b.set_yscale("log")
    ax2.plot(epochs, [r.heldout_qw for r in rows], marker="o", ms=3,
             label="heldout qw")
    ax2.plot(epochs, [r.heldout_qe for r in rows], marker="s", ms=3,
             label="heldout qe")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("index value")
    ax2.legend(fontsize=8)
    ax1.set_title("training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


@dataclass
class BenchResult:
    size: int
    iters: int
    forward_s: list
    end_to_end_s: list

    @staticmethod
    def _stats(samples):
        arr = np.asarray(samples)
        return {
            "mean_s": float(arr.mean()),
            "median_s": float(np.median(arr)),
            "p95_s": float(np.percentile(arr, 95)),
            "fps": float(1.0 / arr.mean()),
        }

    def forward_stats(self):
        return self._stats(self.forward_s)

    def end_to_end_stats(self):
        return self._stats(self.end_to_end_s)


def write_bench_csv(result, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "forward_s", "end_to_end_s"])
        for i, (f, e) in enumerate(zip(result.forward_s, result.end_to_end_s)):
            writer.writerow([i, f"{f:.6f}", f"{e:.6f}"])


def render_bench_figure(result, path):
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ms_fwd = np.asarray(result.forward_s) * 1e3
    ms_e2e = np.asarray(result.end_to_end_s) * 1e3
    bins = max(5, min(30, result.iters))
    ax.hist(ms_fwd, bins=bins, alpha=0.7, label="forward")
    ax.hist(ms_e2e, bins=bins, alpha=0.5, label="end to end")
    ax.set_xlabel("latency per frame (ms)")
    ax.set_ylabel("count")
    stats = result.forward_stats()
    ax.set_title(f"{result.size}x{result.size} inference, "
                 f"mean {stats['mean_s'] * 1e3:.1f} ms ({stats['fps']:.1f} fps)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
