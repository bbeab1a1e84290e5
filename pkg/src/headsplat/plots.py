"""Matplotlib figure output for the CLI report paths (written beside CSV/JSON)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def loss_curve(losses, path: str | Path, title: str = "optimization loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(len(losses)), losses, lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metric_bars(report, path: str | Path) -> None:
    idx = np.arange(len(report.frame_indices))
    finite = [v if v != float("inf") else np.nan for v in report.psnr_values]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax1.bar(idx, finite, color="#4878d0")
    ax1.set_xlabel("reconstruction frame")
    ax1.set_ylabel("PSNR (dB)")
    ax1.set_xticks(idx, [str(i) for i in report.frame_indices], fontsize=7)
    ax2.bar(idx, report.ssim_values, color="#ee854a")
    ax2.set_xlabel("reconstruction frame")
    ax2.set_ylabel("SSIM")
    ax2.set_ylim(0, 1.05)
    ax2.set_xticks(idx, [str(i) for i in report.frame_indices], fontsize=7)
    fig.suptitle(f"mean PSNR {report.mean_psnr:.2f} dB / mean SSIM {report.mean_ssim:.4f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def bench_breakdown(report, path: str | Path) -> None:
    pose = np.asarray(report.pose_times) * 1e3
    rend = np.asarray(report.render_times) * 1e3
    idx = np.arange(len(pose))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(idx, pose, label="pose", color="#6acc64")
    ax.bar(idx, rend, bottom=pose, label="render", color="#956cb4")
    ax.set_xlabel("frame")
    ax.set_ylabel("time (ms)")
    s = report.summary()
    ax.set_title(
        f"{report.gaussians} splats @ {report.resolution[0]}x{report.resolution[1]}: "
        f"{s['fps_mean']:.1f} FPS mean"
    )
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
