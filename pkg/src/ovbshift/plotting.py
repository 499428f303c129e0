"""PNG figures for the CLI report path (optional; CSV/JSON stay the primary output)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "svg.hashsalt": "ovbshift",
}


def _figure(width=5.0):
    return plt.subplots(figsize=(width, width * GOLDEN))


def _save(fig, path):
    # drop the version stamp so reruns are byte-identical
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_sweep(rows: list, path, benchmark_s=None):
    """Test loss, worst case and DR estimate against the budget ``s``."""
    ok = [r for r in rows if r.get("status") == "ok"]
    s = [r["s"] for r in ok]
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(s, [r["worst_case"] for r in ok], "o-", color="C3", label="worst case (trained model)")
        ax.plot(s, [r["L_dr_s"] for r in ok], "s--", color="C0", label="DR estimate")
        if any(r.get("ci_high") is not None for r in ok):
            ax.fill_between(
                s, [r["ci_low"] for r in ok], [r["ci_high"] for r in ok], color="C3", alpha=0.15, lw=0,
            )
        if all(r.get("test_loss") is not None for r in ok) and ok:
            ax.plot(s, [r["test_loss"] for r in ok], "^-", color="k", label="target test loss")
        if benchmark_s is not None:
            ax.axvline(benchmark_s, color="0.5", ls=":", label="benchmarked s")
        ax.set_xlabel(r"budget $s = \rho\, C_Y C_D$")
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        _save(fig, path)


def plot_bounds(report: dict, path):
    """Point estimates next to the bound interval and its bootstrap band."""
    ev, wc = report["eval"], report["worst_case"]
    labels = ["unadjusted", "IPW", "DR (short)"]
    vals = [ev["L_unadjusted"], ev["L_ipw"], ev["L_dr_s"]]
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.scatter(range(3), vals, color="C0", zorder=3)
        x = 3
        ax.vlines(x, wc["best_case"], wc["worst_case"], color="C3", lw=3, label=f"bound at s={wc['budget']['s']:.3g}")
        boot = report.get("bootstrap")
        if boot:
            ax.vlines(x + 0.15, boot["best_case"][0], boot["worst_case"][1], color="C3", lw=1, alpha=0.5, label="bootstrap band")
        test = report.get("test")
        if test and test.get("test_loss") is not None:
            ax.axhline(test["test_loss"], color="k", ls="--", lw=1, label="target test loss")
        ax.set_xticks(range(4), labels + ["bound"])
        ax.set_ylabel("loss")
        ax.legend(fontsize=7)
        _save(fig, path)


def plot_trace(objective: list, path):
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.plot(range(len(objective)), objective, color="C2")
        ax.set_xlabel("iteration")
        ax.set_ylabel("objective")
        _save(fig, path)
