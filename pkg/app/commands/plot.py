"""
plot: stand-alone SVG figures from a tracking CSV.
"""
from pathlib import Path

from app.commands import CommandOutcome, add_input_arguments, input_paths, load_tracking
from app.commands.kalman import add_filter_arguments, filtered_kinematics
from app.config import settings
from app.services.plotting import renderer
from app.services.prediction import predict_k
from app.services.storage import storage

KINDS = ("tracks", "one-step", "prediction", "velocity", "speed")
MAX_RECTANGLES = 200


def run_plot(args) -> CommandOutcome:
    if args.kind == "tracks":
        svg = renderer.tracks(load_tracking(args))
    else:
        series, model, result, kin = filtered_kinematics(args)
        if args.kind == "speed":
            svg = renderer.speed_series(series.times, kin.speed, title=f"Speed, entity {args.entity}")
        elif args.kind == "one-step":
            predicted = [s.Z[:2] for s in result.predicted[:-1] if not s.diffuse]
            svg = renderer.one_step_overlay(series.samples, predicted, title=f"One-step prediction, entity {args.entity}")
        elif args.kind == "velocity":
            svg = renderer.velocity_field(result.filtered_means[:, :2], kin.velocity)
        else:
            filtered = [r.filtered for r in result.records if not r.filtered.diffuse]
            stride = max(1, len(filtered) // MAX_RECTANGLES)
            predictions = [predict_k(model, state, args.horizon)[-1] for state in filtered[::stride]]
            svg = renderer.prediction_overlay(
                series.samples, predictions,
                title=f"{args.horizon}-step prediction, entity {args.entity}",
            )
    path = storage.write_svg(args.output, svg)
    return CommandOutcome(output=path, outputs=[path], inputs=input_paths(args))


def register(subparsers):
    p = subparsers.add_parser("plot", help="render an SVG figure")
    add_input_arguments(p)
    p.add_argument("--kind", choices=KINDS, default="tracks", help="figure type (default: %(default)s)")
    p.add_argument("--horizon", type=int, default=settings.PREDICTION_HORIZON,
                   help="steps ahead for --kind prediction (default: %(default)s)")
    add_filter_arguments(p)
    p.add_argument("-o", "--output", type=Path, default=Path(settings.OUTPUT_DIR) / "figure.svg",
                   help="SVG output file (default: %(default)s)")
    p.set_defaults(handler=run_plot)
