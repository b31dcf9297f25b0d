"""Static SVG scatter plots of Dice against each quality metric."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_LABELS = {
    "mean_artefact_variance": "mean artefact variance",
    "snr": "SNR (gray matter)",
    "cnr": "CNR (gray vs white matter)",
}


def scatter_svg(xs, dices, metric: str, kinds=None, rho: float | None = None) -> bytes:
    """Render one scatter plot; identical inputs give identical bytes."""
    with matplotlib.rc_context({"svg.hashsalt": "decoupled_qc", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        try:
            if kinds is None:
                ax.scatter(xs, dices, s=12)
            else:
                for kind in sorted(set(kinds)):
                    sel = [i for i, k in enumerate(kinds) if k == kind]
                    ax.scatter([xs[i] for i in sel], [dices[i] for i in sel], s=12, label=kind)
                ax.legend(fontsize=7, loc="lower left")
            ax.set_xlabel(_LABELS.get(metric, metric))
            ax.set_ylabel("Dice")
            if rho is not None:
                ax.set_title(f"Spearman rho = {rho:.3f}")
            fig.tight_layout()
            buf = io.BytesIO()
            fig.savefig(buf, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    return buf.getvalue()
