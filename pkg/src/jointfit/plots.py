"""Figure rendering for association-curve reports.

Renders the estimated log-hazard-ratio curve with its 95% band above a
density strip of the calibrated shared component, with dashed percentile
markers. Output is deterministic: fixed style, fixed dpi, no varying
metadata in the PNG.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_RC = {
    "figure.figsize": (7.0, 5.0),
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def association_figure(curve, summary, path, title=None, true_f=None) -> None:
    """Render one association component report figure to ``path``.

    ``curve`` is a frame with nu/f_mean/f_lo/f_hi columns; ``summary`` the
    percentile/histogram dictionary of the shared component; ``true_f`` an
    optional callable overlaid for simulated data.
    """
    with plt.rc_context(_RC):
        fig, (ax, axd) = plt.subplots(
            2, 1, sharex=True, gridspec_kw={"height_ratios": (3.2, 1.0), "hspace": 0.08}
        )
        nu = np.asarray(curve["nu"], dtype=float)
        ax.fill_between(nu, curve["f_lo"], curve["f_hi"], alpha=0.25, color="#1f77b4",
                        linewidth=0, label="95% credible band")
        ax.plot(nu, curve["f_mean"], color="#1f77b4", lw=1.8, label="posterior mean")
        if true_f is not None:
            ax.plot(nu, true_f(nu), color="black", lw=1.2, ls="--", label="truth")
        ax.axhline(0.0, color="grey", lw=0.6)
        ax.axvline(0.0, color="grey", lw=0.6)
        ax.set_ylabel("log hazard ratio f(ν)")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, loc="best")

        edges = np.asarray(summary["hist_edges"], dtype=float)
        counts = np.asarray(summary["hist_counts"], dtype=float)
        dens = counts / max(counts.sum(), 1.0) / np.diff(edges)
        axd.bar(edges[:-1], dens, width=np.diff(edges), align="edge",
                color="#bbbbbb", edgecolor="none")
        for label, value in summary["percentiles"].items():
            axd.axvline(value, color="#555555", lw=0.8, ls="--")
            axd.text(value, axd.get_ylim()[1] * 0.95, label, rotation=90,
                     ha="right", va="top", fontsize=7, color="#333333")
        axd.set_xlabel("shared component ν")
        axd.set_ylabel("density")
        fig.savefig(path, dpi=150, metadata={"Software": None})
        plt.close(fig)
