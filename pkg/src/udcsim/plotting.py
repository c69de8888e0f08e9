"""Figures written next to the JSON reports (PNG, non-interactive backend)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

CHANNELS = ("R", "G", "B")


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_curves(series: dict, path, title="training", log_y=False):
    """One line per named series of per-step values."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, values in series.items():
        if len(values):
            ax.plot(np.arange(len(values)), values, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_title(title)
    if log_y:
        ax.set_yscale("log")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_probes(probes: dict, path):
    """Recovered vs oracle per-channel gain and noise variance."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    x = np.arange(3)
    for ax, key, label in ((axes[0], "brightness", "channel gain"), (axes[1], "noise_variance", "noise variance")):
        ax.bar(x - 0.2, probes[key]["oracle"], 0.4, label="oracle")
        ax.bar(x + 0.2, probes[key]["recovered"], 0.4, label="generator")
        ax.set_xticks(x, CHANNELS)
        ax.set_title(label)
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_impulse(response, psf, path):
    """Blur-stage impulse response per channel next to the oracle kernel."""
    response = np.asarray(response)
    fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
    axes[0].imshow(psf, cmap="magma")
    axes[0].set_title("oracle PSF")
    for c in range(3):
        r = response[c] / (response[c].sum() or 1.0)
        axes[c + 1].imshow(r, cmap="magma")
        axes[c + 1].set_title(f"response {CHANNELS[c]}")
    for ax in axes:
        ax.set_axis_off()
    return _save(fig, path)


def plot_eval(report: dict, path):
    """Per-image PSNR of one evaluation report."""
    fig, ax = plt.subplots(figsize=(6, 3))
    vals = [r["psnr"] for r in report["per_image"]]
    ax.bar(np.arange(len(vals)), vals)
    ax.axhline(report["psnr"], color="k", lw=1, ls="--", label=f"mean {report['psnr']:.2f} dB")
    ax.set_xlabel("image")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def closed_loop_figures(report: dict, out_dir) -> list:
    paths = [plot_probes(report["probes"], os.path.join(out_dir, "probes.png"))]
    psf = np.asarray(report["config"]["sgm"]["psf"])
    paths.append(plot_impulse(report["probes"]["impulse"]["response"], psf, os.path.join(out_dir, "impulse.png")))
    tr = report.get("training", {})
    if "gan" in tr:
        paths.append(plot_curves(tr["gan"], os.path.join(out_dir, "gan_losses.png"), "adversarial training"))
    curves = {k: tr[k] for k in ("pretrain_loss", "restorer_generated_loss", "restorer_oracle_loss") if k in tr}
    if curves:
        paths.append(plot_curves(curves, os.path.join(out_dir, "restorer_losses.png"), "restorer L1", log_y=True))
    return paths
