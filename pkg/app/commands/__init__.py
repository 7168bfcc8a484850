"""
CLI subcommand handlers for Pitch Kinematics.

Each module exposes `register(subparsers)`; handlers take the parsed
arguments and return a CommandOutcome describing what they wrote.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from app.config import settings
from app.services.errors import DataError
from app.services.state_space import SingleEntityModel, build_single, model_from_json
from app.services.storage import TABLE_FORMATS
from app.services.trajectory_data import TrackingSeries, parse_tracking_csv
from app.utils.file_utils import read_text


@dataclass
class CommandOutcome:
    """Primary output, all written files, inputs read and the seed used."""

    output: Path
    outputs: List[Path] = field(default_factory=list)
    inputs: List[str] = field(default_factory=list)
    seed: Optional[int] = None


def add_output_arguments(parser, default_name: str, tabular: bool = True):
    parser.add_argument("-o", "--output", type=Path, default=Path(settings.OUTPUT_DIR) / default_name,
                        help="primary output file (default: %(default)s)")
    if tabular:
        parser.add_argument("--format", choices=TABLE_FORMATS, default="csv",
                            help="table format (default: %(default)s)")


def add_model_arguments(parser):
    parser.add_argument("--q", type=float, default=settings.START_Q,
                        help="acceleration variance per axis, Q = q*I, (cm/s^2)^2 (default: %(default)s)")
    parser.add_argument("--sigma", type=float, default=settings.START_SIGMA,
                        help="measurement noise std dev per axis in cm (default: %(default)s)")
    parser.add_argument("--model", type=Path, default=None,
                        help="model JSON document; overrides --q/--sigma")


def add_input_arguments(parser, entity: bool = True):
    parser.add_argument("--input", type=Path, required=True, help="tracking CSV (frame,entity_id,x_cm,y_cm)")
    parser.add_argument("--dt", type=float, default=settings.SAMPLE_DT,
                        help="sampling interval in seconds (default: %(default)s)")
    if entity:
        parser.add_argument("--entity", type=int, default=1, help="entity id (default: %(default)s)")


def load_tracking(args) -> Dict[int, TrackingSeries]:
    return parse_tracking_csv(read_text(args.input), dt=args.dt)


def select_entity(series: Dict[int, TrackingSeries], entity_id: int) -> TrackingSeries:
    if entity_id not in series:
        raise DataError(f"Entity {entity_id} not present in input (found {sorted(series)})")
    return series[entity_id]


def model_from_args(args) -> SingleEntityModel:
    if getattr(args, "model", None) is not None:
        return model_from_json(read_text(args.model))
    return build_single(args.dt, args.q * np.eye(2), (args.sigma, args.sigma))


def input_paths(args) -> List[str]:
    paths = [getattr(args, name, None) for name in ("input", "model", "params")]
    return [str(p) for p in paths if p is not None]
