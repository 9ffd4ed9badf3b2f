"""Matplotlib report figures rendered to files alongside the delimited output."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_scree_plot(fractions: np.ndarray, path: str) -> None:
    """Per-mode and cumulative explained-variance fractions."""
    fractions = np.asarray(fractions)
    modes = np.arange(1, len(fractions) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(modes, fractions, color="tab:blue", label="per mode")
    ax.plot(modes, np.cumsum(fractions), "o-", color="tab:orange", label="cumulative")
    ax.set_xlabel("mode")
    ax.set_ylabel("fraction of variance")
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_llh_curve(mean_test_llh: np.ndarray, k_star: int, path: str) -> None:
    """Mean held-out log-likelihood against the mixture component count."""
    mean_test_llh = np.asarray(mean_test_llh)
    ks = np.arange(1, len(mean_test_llh) + 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ks, mean_test_llh, "o-", color="tab:blue")
    ax.axvline(k_star, color="tab:red", linestyle="--", label=f"selected k = {k_star}")
    ax.set_xlabel("mixture components")
    ax.set_ylabel("mean test log-likelihood")
    ax.set_xticks(ks)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_metric_bars(rows: list[dict], path: str) -> None:
    """Per-case bars for each metric column."""
    if not rows:
        return
    fields = [k for k in rows[0] if k != "case"]
    fig, axes = plt.subplots(1, len(fields), figsize=(2.2 * len(fields), 3.0))
    if len(fields) == 1:
        axes = [axes]
    x = np.arange(len(rows))
    for ax, f in zip(axes, fields):
        vals = [row[f] for row in rows]
        ax.bar(x, vals, color="tab:blue")
        ax.set_title(f, fontsize=9)
        ax.set_xticks(x)
        ax.set_xticklabels([str(row.get("case", i)) for i, row in enumerate(rows)],
                           fontsize=7, rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
