"""Figures rendered from the CSV outputs of a run (Agg backend, PNG files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import cli  # noqa: E402


def _save(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def plot_curves(curves: dict, path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(curves["generation"], curves["loss"], "o-", label="training loss")
    ax.semilogy(curves["generation"], curves["max_error"], "s-", label="max prediction error")
    ax.set_xlabel("generation")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _save(fig, path)


def plot_landscape(P, cols: dict, path, candidates=None) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    if P.shape[1] == 1:
        p = P[:, 0]
        ax.fill_between(p, cols["J_low"], cols["J_high"], alpha=0.3, label="gamma interval")
        ax.plot(p, cols["J_surrogate"], label="surrogate J")
        ax.set_xlabel("p")
        ax.set_ylabel("J")
        for c in candidates or []:
            ax.plot(c.p_refined[0], c.J_refined, "k*")
        ax.legend()
    else:
        side = int(round(np.sqrt(len(P))))
        a = P[:, 0].reshape(side, side)
        b = P[:, 1].reshape(side, side)
        J = cols["J_surrogate"].reshape(side, side)
        cs = ax.contourf(a, b, np.log10(np.maximum(J - J.min(), 1e-16) + 1e-12), levels=30)
        fig.colorbar(cs, ax=ax, label="log10(J - min J)")
        for c in candidates or []:
            ax.plot(*c.p_refined, "w*")
        ax.set_xlabel("p1")
        ax.set_ylabel("p2")
    return _save(fig, path)


def plot_bound(rows, path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [", ".join(f"{v:.3g}" for v in r["p"]) for r in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r["bound"] for r in rows], 0.4, label="bound over one gap")
    ax.bar(x + 0.2, [r["delta_max"] for r in rows], 0.4, label="delta_max")
    ax.set_xticks(x, labels)
    ax.set_yscale("log")
    ax.set_xlabel("p")
    ax.legend()
    return _save(fig, path)


def render_directory(directory) -> list[tuple[str, str]]:
    """Render every figure whose input CSV exists; returns (input, figure) pairs."""
    d = Path(directory)
    done = []
    if (d / cli.CURVES).exists():
        done.append((cli.CURVES, plot_curves(cli.read_curves(d / cli.CURVES), d / "training_curves.png")))
    if (d / cli.LANDSCAPE).exists():
        P, cols = cli.read_landscape(d / cli.LANDSCAPE)
        cands = cli.read_candidates(d / cli.CANDIDATES)[1] if (d / cli.CANDIDATES).exists() else None
        done.append((cli.LANDSCAPE, plot_landscape(P, cols, d / "landscape.png", cands)))
    if (d / cli.BOUND).exists():
        done.append((cli.BOUND, plot_bound(cli.read_bound(d / cli.BOUND)[1], d / "bound.png")))
    return [(s, Path(f).name) for s, f in done]
