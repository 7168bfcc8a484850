"""
SVG figures for Pitch Kinematics.

Every method renders one figure and returns the SVG document as text.
"""
import io
from typing import Mapping, Optional, Sequence

import matplotlib
matplotlib.use("Agg")  # Non-interactive backend

import matplotlib.pyplot as plt
import matplotlib.patches as mpatches
import numpy as np

from app.services.prediction import Prediction
from app.services.trajectory_data import FieldSpec, TrackingSeries

TRUTH_COLOR = "#d62728"
PREDICTION_COLOR = "#1f77b4"
PITCH_COLOR = "#2ca02c"

# fixed ids and no timestamp so identical inputs give identical files
plt.rcParams["svg.hashsalt"] = "pitch-kinematics"


class FigureRenderer:
    """Renders tracking, prediction, velocity and VAE figures."""

    def __init__(self, figsize=(10.5, 6.8)):
        self.figsize = figsize

    def _pitch_axes(self, field: FieldSpec, title: str):
        fig, ax = plt.subplots(figsize=self.figsize)
        ax.add_patch(mpatches.Rectangle(
            (field.x_min, field.y_min), field.x_max - field.x_min, field.y_max - field.y_min,
            fill=False, edgecolor=PITCH_COLOR, linewidth=1.5,
        ))
        ax.set_xlim(field.x_min - 200, field.x_max + 200)
        ax.set_ylim(field.y_min - 200, field.y_max + 200)
        ax.set_aspect("equal")
        ax.set_xlabel("x (cm)")
        ax.set_ylabel("y (cm)")
        ax.set_title(title)
        return fig, ax

    @staticmethod
    def _to_svg(fig) -> str:
        buffer = io.StringIO()
        fig.savefig(buffer, format="svg", bbox_inches="tight", metadata={"Date": None})
        plt.close(fig)
        return buffer.getvalue()

    def tracks(self, series: Mapping[int, TrackingSeries], field: Optional[FieldSpec] = None) -> str:
        """All entity paths, ball (id 0) dashed."""
        field = field or FieldSpec()
        fig, ax = self._pitch_axes(field, "Tracking overview")
        for entity_id, s in series.items():
            style = "--" if entity_id == 0 else "-"
            ax.plot(s.samples[:, 0], s.samples[:, 1], style, linewidth=0.8, label=str(entity_id))
        if len(series) <= 12:
            ax.legend(title="entity", fontsize=7, loc="upper right")
        return self._to_svg(fig)

    def one_step_overlay(
        self,
        truth: np.ndarray,
        predicted: np.ndarray,
        field: Optional[FieldSpec] = None,
        title: str = "One-step prediction",
    ) -> str:
        """Truth (red) against one-step predicted positions (blue), both (n, 2)."""
        field = field or FieldSpec()
        fig, ax = self._pitch_axes(field, title)
        truth = np.asarray(truth, dtype=float).reshape(-1, 2)
        predicted = np.asarray(predicted, dtype=float).reshape(-1, 2)
        ax.plot(truth[:, 0], truth[:, 1], "-", color=TRUTH_COLOR, linewidth=1.0, label="truth")
        ax.plot(predicted[:, 0], predicted[:, 1], ".-", color=PREDICTION_COLOR,
                linewidth=0.6, markersize=2, label="one-step prediction")
        ax.legend(loc="upper right")
        return self._to_svg(fig)

    def prediction_overlay(
        self,
        truth: np.ndarray,
        predictions: Sequence[Prediction],
        field: Optional[FieldSpec] = None,
        title: str = "Prediction",
    ) -> str:
        """
        Truth (red) against predicted positions with rectangles (blue).

        Args:
            truth: (n, 2) observed positions
            predictions: Predictions to draw, each with its rectangle
        """
        field = field or FieldSpec()
        fig, ax = self._pitch_axes(field, title)
        truth = np.asarray(truth, dtype=float)
        ax.plot(truth[:, 0], truth[:, 1], "-", color=TRUTH_COLOR, linewidth=1.0, label="truth")

        if predictions:
            means = np.array([p.mean[:2] for p in predictions])
            ax.plot(means[:, 0], means[:, 1], ".", color=PREDICTION_COLOR, markersize=3, label="prediction")
            for p in predictions:
                x_lo, x_hi, y_lo, y_hi = p.rectangle
                ax.add_patch(mpatches.Rectangle(
                    (x_lo, y_lo), x_hi - x_lo, y_hi - y_lo,
                    fill=False, edgecolor=PREDICTION_COLOR, linewidth=0.4, alpha=0.6,
                ))
        ax.legend(loc="upper right")
        return self._to_svg(fig)

    def velocity_field(
        self,
        positions: np.ndarray,
        velocities: np.ndarray,
        field: Optional[FieldSpec] = None,
        stride: int = 5,
    ) -> str:
        """Velocity arrows along the filtered path, every `stride` samples."""
        field = field or FieldSpec()
        fig, ax = self._pitch_axes(field, "Velocity field")
        positions = np.asarray(positions, dtype=float)[::stride]
        velocities = np.asarray(velocities, dtype=float)[::stride]
        ax.plot(positions[:, 0], positions[:, 1], "-", color="#7f7f7f", linewidth=0.5)
        ax.quiver(
            positions[:, 0], positions[:, 1], velocities[:, 0], velocities[:, 1],
            color=PREDICTION_COLOR, angles="xy", scale_units="xy", scale=1.0, width=0.002,
        )
        return self._to_svg(fig)

    def speed_series(self, times: np.ndarray, speeds: np.ndarray, title: str = "Speed") -> str:
        fig, ax = plt.subplots(figsize=(self.figsize[0], 3.5))
        ax.plot(times, speeds, color=PREDICTION_COLOR, linewidth=1.0)
        ax.set_xlabel("t (s)")
        ax.set_ylabel("speed (cm/s)")
        ax.set_ylim(bottom=0)
        ax.set_title(title)
        return self._to_svg(fig)

    def trajectories(
        self,
        paths: Sequence[np.ndarray],
        field: Optional[FieldSpec] = None,
        reference: Optional[Sequence[np.ndarray]] = None,
        title: str = "Trajectories",
    ) -> str:
        """
        Paths in field coordinates; `reference` paths are drawn in red beneath.

        Used for VAE reconstructions (reference = originals) and generations.
        """
        field = field or FieldSpec()
        fig, ax = self._pitch_axes(field, title)
        for path in reference or []:
            path = np.asarray(path, dtype=float).reshape(-1, 2)
            ax.plot(path[:, 0], path[:, 1], "-", color=TRUTH_COLOR, linewidth=0.8)
        for path in paths:
            path = np.asarray(path, dtype=float).reshape(-1, 2)
            ax.plot(path[:, 0], path[:, 1], "-", color=PREDICTION_COLOR, linewidth=0.8)
            ax.plot(path[0, 0], path[0, 1], "o", color=PREDICTION_COLOR, markersize=3)
        return self._to_svg(fig)


# Global renderer instance
renderer = FigureRenderer()
