"""Report figures (PNG, non-interactive backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_margin_slice(margin: np.ndarray, path, axis: int = 2, title: str = "") -> None:
    """Mid-plane slice of the pseudo-convexity margin (positive = violation)."""
    idx = margin.shape[axis] // 2
    sl = np.take(margin, idx, axis=axis)
    fig, ax = plt.subplots(figsize=(5, 4))
    lim = float(np.abs(sl).max()) or 1.0
    im = ax.imshow(sl.T, origin="lower", cmap="coolwarm", vmin=-lim, vmax=lim)
    fig.colorbar(im, ax=ax, label="margin")
    ax.set_title(title or f"gradient-bound margin, slice {idx}")
    _save(fig, path)


def plot_energy(t, energy, div_D, div_B, path) -> None:
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    e0 = energy[np.argmin(np.abs(t))]
    a1.plot(t, (energy - e0) / e0)
    a1.set_ylabel("relative energy change")
    a2.semilogy(t, np.maximum(div_D, 1e-300), label="div D")
    a2.semilogy(t, np.maximum(div_B, 1e-300), label="div B")
    a2.set_xlabel("t")
    a2.set_ylabel("relative divergence")
    a2.legend()
    _save(fig, path)


def plot_trace_energy(t, btau_l2, dnu_l2, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t, btau_l2, label="|B_tau|")
    ax.plot(t, dnu_l2, label="|D_nu|")
    ax.set_xlabel("t")
    ax.set_ylabel("L2 over boundary")
    ax.legend()
    _save(fig, path)


def plot_carleman(reports, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in reports:
        ax.loglog(r.s, np.maximum(r.ratio, 1e-300), marker="o", ms=3, label=r.inequality)
    ax.set_xlabel("s")
    ax.set_ylabel("LHS / RHS")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_stability(report, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(report.E, report.N, "o", label="sweep")
    if report.fit is not None and len(report.E):
        e = np.geomspace(report.E.min(), report.E.max(), 50)
        ax.loglog(e, report.fit.C_fit * e**report.fit.kappa_hat, "-",
                  label=f"fit, kappa={report.fit.kappa_hat:.3f}")
        ax.loglog(e, report.fit.C_hat * e**report.fit.kappa_hat, "--", label="envelope")
    ax.set_xlabel("observation norm E")
    ax.set_ylabel("coefficient norm N")
    ax.legend(fontsize=8)
    _save(fig, path)
