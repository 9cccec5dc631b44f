"""SVG figures of a run: precision-recall curves, event-study coefficients, score heat map"""
from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from src.schemas.evaluation import PRCurve, Stage  # noqa: E402
from src.schemas.events import REFERENCE_BIN, RegressionResult  # noqa: E402
from src.schemas.scores import ScorePanel  # noqa: E402

# fixed ids and no creation date, so reruns write identical files
plt.rcParams["svg.hashsalt"] = "damage-monitor"
plt.rcParams["svg.fonttype"] = "none"
SVG_METADATA = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    return path


def plot_pr_curves(curves: Dict[Stage, PRCurve], title: str, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for stage, curve in sorted(curves.items(), key=lambda item: item[0].value):
        ax.step(curve.recall, curve.precision, where="post",
                label=f"{stage.value} (AP {curve.average_precision:.3f})")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_title(title)
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_event_study(result: RegressionResult, title: str, path: Path) -> Path:
    bins = sorted(result.coefficients)
    values = [result.coefficients[b] for b in bins]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.axvline(0.0, color="gray", linestyle="--", linewidth=0.8)
    ax.plot(bins, values, marker="o")
    ax.plot([REFERENCE_BIN], [0.0], marker="o", color="gray")
    ax.set_xticks(bins)
    ax.set_xlabel("Images relative to first event")
    ax.set_ylabel("Coefficient")
    ax.set_title(title)
    return _save(fig, path)


def plot_score_map(panel: ScorePanel, path: Path) -> Path:
    """Stage-2 scores (stage-1 when unsmoothed) at the final date"""
    scores = panel.stage2 if panel.stage2 is not None else panel.stage1
    layer = np.ma.masked_invalid(scores[-1])
    fig, ax = plt.subplots(figsize=(5, 5))
    image = ax.imshow(layer, cmap="inferno", vmin=0.0, vmax=1.0, interpolation="nearest")
    fig.colorbar(image, ax=ax, fraction=0.046)
    ax.set_title(f"{panel.city_id} {panel.dates[-1].isoformat()}")
    ax.set_xticks([])
    ax.set_yticks([])
    return _save(fig, path)
