"""Static SVG charts of HI curves.

Output is byte-stable for identical inputs: the SVG id salt is fixed and
the creation-date metadata is dropped.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluator import PredictionCurve  # noqa: E402

_RC = {"svg.hashsalt": "arrul", "svg.fonttype": "none", "figure.figsize": (7.0, 3.6),
       "axes.grid": True, "grid.alpha": 0.3}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_prediction(curve: PredictionCurve, path: str | Path, title: str | None = None) -> Path:
    """Predicted HI against the true HI (when known) over acquisition index."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        if curve.truth is not None:
            ax.plot(curve.acq_index, curve.truth, color="0.3", lw=1.2, label="true HI")
        ax.plot(curve.acq_index, curve.predicted, color="tab:red", lw=1.0, label="predicted HI")
        ax.set_xlabel("acquisition index")
        ax.set_ylabel("HI")
        ax.set_title(title or curve.bearing_id)
        ax.legend(loc="lower left")
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_comparison(curves: Sequence[tuple[str, PredictionCurve]], path: str | Path,
                    title: str = "", shade: tuple[int, int] | None = None) -> Path:
    """Several labelled predictions of one bearing on shared axes.

    ``shade`` marks an acquisition-index range, e.g. a transient spike.
    """
    if not curves:
        raise ValueError("nothing to plot")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ref = curves[0][1]
        if ref.truth is not None:
            ax.plot(ref.acq_index, ref.truth, color="0.3", lw=1.2, label="true HI")
        for label, curve in curves:
            ax.plot(curve.acq_index, curve.predicted, lw=1.0, label=label)
        if shade is not None:
            ax.axvspan(shade[0], shade[1], color="tab:orange", alpha=0.15, label="spike")
        ax.set_xlabel("acquisition index")
        ax.set_ylabel("HI")
        ax.set_title(title or ref.bearing_id)
        ax.legend(loc="lower left")
        fig.tight_layout()
        return _save(fig, Path(path))
