"""Figures for the CLI report path."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .sweep import SweepResult  # noqa: E402

_MARKERS = {"SINGLE_PHOTON": "o", "DECOY": "s", "WCP_WORSTCASE": "^", "DPS": "D"}


def plot_sweep(result: SweepResult, path) -> Path:
    """Log-scale rate against loss, one series per rate mode."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for mode in sorted({p.mode for p in result.points}):
        pts = [p for p in result.points if p.mode == mode and not p.error and p.rate > 0]
        if not pts:
            continue
        fit = result.fits.get(mode)
        label = mode if fit is None else f"{mode}  slope {fit.slope:.2f}"
        ax.semilogy([p.loss_db for p in pts], [p.rate for p in pts],
                    marker=_MARKERS.get(mode, "x"), label=label)
    ax.set_xlabel("channel loss [dB]")
    ax.set_ylabel("secret key rate [bits / pulse]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the file byte-stable across runs
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
