"""
Tracking data ingestion for Pitch Kinematics.
Parses, validates, windows and normalizes 2D tracking series.
"""
import csv
import io
from dataclasses import dataclass, field as dataclass_field
from typing import Dict, Iterable, List, Mapping, Optional, TextIO, Tuple, Union

import numpy as np

from app.config import settings
from app.services.errors import DataError


CSV_HEADER = ("frame", "entity_id", "x_cm", "y_cm")
BALL_ID = 0
MAX_ENTITY_ID = 22


@dataclass(frozen=True)
class FieldSpec:
    """Axis-aligned pitch rectangle in centimeters."""

    x_min: float = settings.FIELD_X_MIN
    x_max: float = settings.FIELD_X_MAX
    y_min: float = settings.FIELD_Y_MIN
    y_max: float = settings.FIELD_Y_MAX

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(
                f"Invalid field bounds: x [{self.x_min}, {self.x_max}], "
                f"y [{self.y_min}, {self.y_max}]"
            )

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min])

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.x_max - self.x_min, self.y_max - self.y_min])

    def contains(self, points: np.ndarray, tolerance: float = 0.0) -> np.ndarray:
        """
        Check which points lie inside the (optionally widened) field.

        Args:
            points: Array of shape (..., 2); NaN rows count as inside
            tolerance: Margin in cm added on every side

        Returns:
            Boolean array of shape (...)
        """
        points = np.asarray(points, dtype=float)
        x, y = points[..., 0], points[..., 1]
        inside = (
            (x >= self.x_min - tolerance) & (x <= self.x_max + tolerance)
            & (y >= self.y_min - tolerance) & (y <= self.y_max + tolerance)
        )
        return inside | np.isnan(x) | np.isnan(y)


@dataclass(frozen=True, eq=False)
class TrackingSeries:
    """
    Positions of one entity sampled every `dt` seconds.

    Sample i is the position at time i*dt; missing samples are NaN rows
    (entity not on the pitch).
    """

    entity_id: int
    samples: np.ndarray
    dt: float = settings.SAMPLE_DT

    def __post_init__(self):
        if self.dt <= 0:
            raise DataError(f"Sampling interval must be positive, got {self.dt}")
        samples = np.array(self.samples, dtype=float).reshape(-1, 2)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrackingSeries):
            return NotImplemented
        return (
            self.entity_id == other.entity_id
            and self.dt == other.dt
            and np.array_equal(self.samples, other.samples, equal_nan=True)
        )

    @property
    def present(self) -> np.ndarray:
        """Mask of samples where the entity was observed."""
        return ~np.isnan(self.samples).any(axis=1)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt


@dataclass(frozen=True, eq=False)
class Window:
    """Gap-free run of consecutive samples."""

    start_index: int
    points: np.ndarray
    length: int = dataclass_field(init=False)

    def __post_init__(self):
        points = np.array(self.points, dtype=float)
        if points.ndim != 2 or points.shape[0] < 2:
            raise DataError("A window needs at least 2 samples")
        if np.isnan(points).any():
            raise DataError(f"Window starting at {self.start_index} contains missing samples")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "length", points.shape[0])


def _parse_row(row: List[str], line: int) -> Tuple[int, int, float, float]:
    """Convert one CSV row, raising DataError with the line number."""
    if len(row) != 4:
        raise DataError(f"malformed row: expected 4 fields, got {len(row)}", line)
    try:
        frame = int(row[0])
        entity_id = int(row[1])
        x = float(row[2])
        y = float(row[3])
    except ValueError:
        raise DataError(f"malformed row: {','.join(row)!r}", line)

    if frame < 0:
        raise DataError(f"malformed row: negative frame {frame}", line)
    if not BALL_ID <= entity_id <= MAX_ENTITY_ID:
        raise DataError(f"malformed row: entity_id {entity_id} outside 0-{MAX_ENTITY_ID}", line)
    if not (np.isfinite(x) and np.isfinite(y)):
        raise DataError("malformed row: non-finite coordinate", line)
    return frame, entity_id, x, y


def parse_tracking_csv(
    text: Union[str, TextIO],
    field: Optional[FieldSpec] = None,
    dt: float = settings.SAMPLE_DT,
) -> Dict[int, TrackingSeries]:
    """
    Parse tracking rows `frame,entity_id,x_cm,y_cm` into one series per entity.

    All series share the time axis 0..max_frame; frames without a row for an
    entity become missing samples.

    Args:
        text: CSV content or an open text stream
        field: Pitch bounds (default field when omitted)
        dt: Sampling interval in seconds

    Returns:
        Mapping entity_id -> TrackingSeries, ordered by entity_id

    Raises:
        DataError: On a bad header, malformed row, out-of-bounds point,
            duplicate (entity, frame) pair or non-monotone frames
    """
    field = field or FieldSpec()
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)

    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise DataError(f"Expected header {','.join(CSV_HEADER)}", 1)

    rows: Dict[int, Dict[int, Tuple[float, float]]] = {}
    last_frame: Dict[int, int] = {}
    max_frame = -1

    for row in reader:
        line = reader.line_num
        if not row or all(not cell.strip() for cell in row):
            continue
        frame, entity_id, x, y = _parse_row([cell.strip() for cell in row], line)

        if not field.contains(np.array([x, y]), settings.FIELD_TOLERANCE_CM):
            raise DataError("out of bounds", line)

        entity_rows = rows.setdefault(entity_id, {})
        if frame in entity_rows:
            raise DataError(f"duplicate sample for entity {entity_id} at frame {frame}", line)
        if entity_id in last_frame and frame < last_frame[entity_id]:
            raise DataError(f"non-monotone frames for entity {entity_id}", line)

        entity_rows[frame] = (x, y)
        last_frame[entity_id] = frame
        max_frame = max(max_frame, frame)

    series = {}
    for entity_id in sorted(rows):
        samples = np.full((max_frame + 1, 2), np.nan)
        for frame, point in rows[entity_id].items():
            samples[frame] = point
        series[entity_id] = TrackingSeries(entity_id=entity_id, samples=samples, dt=dt)
    return series


def serialize_tracking_csv(series: Union[Mapping[int, TrackingSeries], Iterable[TrackingSeries]]) -> str:
    """
    Write series back to the tracking CSV format.

    Rows are ordered by frame, then entity; missing samples produce no row.
    Floats use their shortest round-trip representation.
    """
    items = list(series.values()) if isinstance(series, Mapping) else list(series)
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)

    n_frames = max((len(s) for s in items), default=0)
    ordered = sorted(items, key=lambda s: s.entity_id)
    for frame in range(n_frames):
        for s in ordered:
            if frame < len(s) and s.present[frame]:
                x, y = s.samples[frame]
                writer.writerow([frame, s.entity_id, repr(float(x)), repr(float(y))])
    return out.getvalue()


def _present_runs(present: np.ndarray) -> List[Tuple[int, int]]:
    present = np.concatenate([[False], present, [False]])
    edges = np.flatnonzero(np.diff(present.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def gap_free_stretches(series: TrackingSeries) -> List[Tuple[int, int]]:
    """Maximal runs of present samples as half-open (start, stop) pairs."""
    return _present_runs(series.present)


def longest_stretch(series: TrackingSeries) -> Window:
    """The longest gap-free stretch of a series as a single window."""
    stretches = gap_free_stretches(series)
    if not stretches:
        raise DataError(f"Entity {series.entity_id} has no observed samples")
    start, stop = max(stretches, key=lambda s: (s[1] - s[0], -s[0]))
    if stop - start < 2:
        raise DataError(f"Entity {series.entity_id} has no stretch of at least 2 samples")
    return Window(start_index=start, points=series.samples[start:stop])


def sliding_windows(series: TrackingSeries, length: int) -> List[Window]:
    """
    Decompose every gap-free stretch into stride-1 windows.

    Windows that would straddle a missing sample are skipped; stretches
    shorter than `length` contribute nothing.

    Args:
        series: Tracking series
        length: Window length (>= 2)

    Returns:
        Windows ordered by start index
    """
    if length < 2:
        raise DataError(f"Window length must be at least 2, got {length}")

    windows = []
    for start, stop in gap_free_stretches(series):
        for first in range(start, stop - length + 1):
            windows.append(Window(start_index=first, points=series.samples[first:first + length]))
    return windows


def normalize_points(points: np.ndarray, field: FieldSpec, clip: bool = False) -> np.ndarray:
    """
    Map field coordinates (cm) affinely onto the unit square.

    Args:
        points: Array of shape (..., 2); NaN passes through
        field: Pitch bounds
        clip: Clamp points in the tolerance band instead of rejecting them

    Raises:
        DataError: If a point lies outside the field and clip is False
    """
    points = np.asarray(points, dtype=float)
    if clip:
        points = np.clip(points, field.lower, field.lower + field.extent)
    elif not field.contains(points).all():
        raise DataError("Point outside field; cannot normalize")
    return (points - field.lower) / field.extent


def denormalize_points(points: np.ndarray, field: FieldSpec) -> np.ndarray:
    """Inverse of `normalize_points`."""
    return np.asarray(points, dtype=float) * field.extent + field.lower


def normalize_unit(series: TrackingSeries, field: Optional[FieldSpec] = None, clip: bool = False) -> TrackingSeries:
    """Series in unit coordinates: x' = (x - x_min) / (x_max - x_min), y' likewise."""
    field = field or FieldSpec()
    return TrackingSeries(
        entity_id=series.entity_id,
        samples=normalize_points(series.samples, field, clip=clip),
        dt=series.dt,
    )


def denormalize(series: TrackingSeries, field: Optional[FieldSpec] = None) -> TrackingSeries:
    """Series back in field coordinates (cm)."""
    field = field or FieldSpec()
    return TrackingSeries(
        entity_id=series.entity_id,
        samples=denormalize_points(series.samples, field),
        dt=series.dt,
    )


def stack_observations(series: Iterable[TrackingSeries]) -> np.ndarray:
    """
    Join entity series column-wise into a (n, 2k) observation matrix.

    Entities keep the given order; NaN marks missing components.
    """
    series = list(series)
    if not series:
        raise DataError("No series to stack")
    lengths = {len(s) for s in series}
    dts = {s.dt for s in series}
    if len(lengths) != 1 or len(dts) != 1:
        raise DataError("Series must share length and sampling interval to be stacked")
    return np.hstack([s.samples for s in series])


def stacked_sliding_windows(series: Iterable[TrackingSeries], length: int) -> List[Window]:
    """
    Stride-1 windows over the stacked observations of several entities.

    A sample counts as present only when every entity was observed, so each
    window is gap-free for all entities at once.
    """
    if length < 2:
        raise DataError(f"Window length must be at least 2, got {length}")
    observations = stack_observations(series)
    present = ~np.isnan(observations).any(axis=1)

    windows = []
    for start, stop in _present_runs(present):
        for first in range(start, stop - length + 1):
            windows.append(Window(start_index=first, points=observations[first:first + length]))
    return windows
