"""Figure rendering for experiment reports.

Every report path that emits delimited data can also render the matching
matplotlib figure next to it; all output goes to files (Agg backend), never
to a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from scipy import stats as sps


def histogram_rows(samples, n_bins=60, x_max=None):
    """Binned empirical density of overlap samples with the chi^2_1 overlay.

    Returns rows (bin_left, bin_right, empirical_density, chisq1_density).
    """
    samples = np.asarray(samples, dtype=float)
    if x_max is None:
        x_max = float(np.quantile(samples, 0.999))
    edges = np.linspace(0.0, x_max, n_bins + 1)
    density, _ = np.histogram(samples, bins=edges, density=True)
    mid = (edges[:-1] + edges[1:]) / 2.0
    overlay = sps.chi2.pdf(mid, df=1)
    return [
        (float(edges[i]), float(edges[i + 1]), float(density[i]), float(overlay[i]))
        for i in range(n_bins)
    ]


def render_histogram(rows, path, title="projection overlaps"):
    rows = np.asarray(rows, dtype=float)
    mid = (rows[:, 0] + rows[:, 1]) / 2.0
    width = rows[:, 1] - rows[:, 0]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(mid, rows[:, 2], width=width, alpha=0.5, label="empirical")
    ax.plot(mid, rows[:, 3], "k-", lw=1.5, label=r"$\chi^2_1$")
    ax.set_xlabel(r"$N\,\langle q, u_i\rangle^2$")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_envelope(rows, path, title="local-law error vs eta"):
    """rows: (eta, error, envelope), sorted ascending in eta."""
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(rows[:, 0], rows[:, 1], "o-", ms=3, label="error")
    ax.loglog(rows[:, 0], rows[:, 2], "k--", label="envelope")
    ax.set_xlabel(r"$\eta$")
    ax.set_ylabel("error")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_trend(rows, path, title="statistic vs N", ylabel="statistic"):
    """rows: (N, statistic), one row per matrix size."""
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.loglog(rows[:, 0], rows[:, 1], "o-")
    ax.set_xlabel("N")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_density(x, rho, path, gamma=None, title="free-convolution density"):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(x, rho, "-", lw=1.5)
    if gamma is not None:
        ax.plot(gamma, np.zeros_like(gamma), "|", ms=12, alpha=0.6)
    ax.set_xlabel("E")
    ax.set_ylabel(r"$\rho_{t}(E)$")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_trajectory(times, lambdas, path, title="eigenvalue trajectories"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in range(lambdas.shape[1]):
        ax.plot(times, lambdas[:, k], lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\lambda_k(t)$")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
