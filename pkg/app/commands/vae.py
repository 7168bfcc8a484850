"""
VAE commands: vae train | reconstruct | generate.
"""
from pathlib import Path

import numpy as np

from app.commands import CommandOutcome, add_output_arguments, input_paths
from app.config import settings
from app.services.errors import DataError
from app.services.plotting import renderer
from app.services.storage import storage
from app.services.synthetic import box_muller, make_rng, trajectory_dataset
from app.services.trajectory_data import (
    FieldSpec,
    denormalize_points,
    gap_free_stretches,
    normalize_points,
    parse_tracking_csv,
)
from app.services.vae import (
    VaeConfig,
    boundary_fraction,
    generate,
    params_from_json,
    params_to_json,
    reconstruct,
    reconstruction_metrics,
    train,
)
from app.utils.file_utils import read_text, sibling_path
from app.utils.logger import training_logger


TRAJECTORY_COLUMNS = ("trajectory", "step", "x_cm", "y_cm")
HISTORY_COLUMNS = ("epoch", "loss", "reconstruction", "kl")


def dataset_from_tracking(text: str, length: int, dt: float, field: FieldSpec) -> np.ndarray:
    """Cut every gap-free stretch into consecutive chunks of `length` samples."""
    rows = []
    for series in parse_tracking_csv(text, field=field, dt=dt).values():
        for start, stop in gap_free_stretches(series):
            for first in range(start, stop - length + 1, length):
                chunk = series.samples[first:first + length]
                rows.append(normalize_points(chunk, field, clip=True).ravel())
    if not rows:
        raise DataError(f"No gap-free stretch of {length} samples in the input")
    return np.array(rows)


def load_dataset(args, field: FieldSpec) -> np.ndarray:
    if args.input is not None:
        return dataset_from_tracking(read_text(args.input), args.length, args.dt, field)
    return trajectory_dataset(args.scripted, args.length * args.dt, seed=args.seed, dt=args.dt, jitter=args.jitter, field=field)


def trajectory_rows(paths: np.ndarray, field: FieldSpec):
    rows = []
    for i, path in enumerate(paths):
        points = denormalize_points(np.asarray(path).reshape(-1, 2), field)
        rows.extend({"trajectory": i, "step": s, "x_cm": float(x), "y_cm": float(y)} for s, (x, y) in enumerate(points))
    return rows


def run_train(args) -> CommandOutcome:
    field = FieldSpec()
    data = load_dataset(args, field)
    config = VaeConfig(
        k=data.shape[1], d=args.latent_dim, h=args.hidden, sigma_x=args.sigma_x,
        seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
    )
    result = train(data, config)
    path = storage.write_json(args.output, params_to_json(result.params, result.history))
    history = storage.write_table(
        sibling_path(args.output, ".history.csv"),
        [s.__dict__ for s in result.history], HISTORY_COLUMNS,
    )
    return CommandOutcome(output=path, outputs=[path, history], inputs=input_paths(args), seed=args.seed)


def _load_params(args):
    return params_from_json(read_text(args.params))


def run_reconstruct(args) -> CommandOutcome:
    field = FieldSpec()
    params = _load_params(args)
    args.length = params.config.k // 2
    data = load_dataset(args, field)
    recon = reconstruct(params, data)
    metrics = reconstruction_metrics(data, recon)
    training_logger.info(
        f"Reconstruction: mean abs dev {metrics.mean_abs_dev:.4f}, "
        f"mean sq err {metrics.mean_sq_err:.5f}, mean max err {metrics.mean_max_err:.4f}"
    )

    path = storage.write_table(args.output, trajectory_rows(recon, field), TRAJECTORY_COLUMNS, args.format)
    outputs = [path, storage.write_json(sibling_path(args.output, ".metrics.json"), metrics.__dict__)]
    if args.plot is not None:
        shown = slice(0, min(6, len(data)))
        svg = renderer.trajectories(
            [denormalize_points(p.reshape(-1, 2), field) for p in recon[shown]],
            field,
            reference=[denormalize_points(p.reshape(-1, 2), field) for p in data[shown]],
            title="VAE reconstruction",
        )
        outputs.append(storage.write_svg(args.plot, svg))
    return CommandOutcome(output=path, outputs=outputs, inputs=input_paths(args), seed=args.seed)


def run_generate(args) -> CommandOutcome:
    field = FieldSpec()
    params = _load_params(args)
    config = params.config
    if args.count < 1:
        raise DataError(f"--count must be at least 1, got {args.count}")

    rng = make_rng(args.seed)
    z = box_muller(rng, (args.count, config.d))
    omega = box_muller(rng, (args.count, config.k)) if args.noise else None
    paths = np.clip(generate(params, z, omega), 0.0, 1.0)

    path = storage.write_table(args.output, trajectory_rows(paths, field), TRAJECTORY_COLUMNS, args.format)
    stats = {"count": args.count, "noise": args.noise, "boundary_fraction": boundary_fraction(paths)}
    outputs = [path, storage.write_json(sibling_path(args.output, ".metrics.json"), stats)]
    if args.plot is not None:
        svg = renderer.trajectories([denormalize_points(p.reshape(-1, 2), field) for p in paths], field,
                                    title="VAE generated trajectories")
        outputs.append(storage.write_svg(args.plot, svg))
    return CommandOutcome(output=path, outputs=outputs, inputs=input_paths(args), seed=args.seed)


def _add_data_arguments(parser, with_length: bool = True):
    parser.add_argument("--input", type=Path, default=None, help="tracking CSV to cut into trajectories")
    parser.add_argument("--scripted", type=int, default=500,
                        help="number of scripted trajectories when no --input is given (default: %(default)s)")
    parser.add_argument("--jitter", type=float, default=0.0, help="scripted-path jitter in cm (default: %(default)s)")
    parser.add_argument("--dt", type=float, default=settings.SAMPLE_DT, help="sampling interval (default: %(default)s)")
    if with_length:
        parser.add_argument("--length", type=int, default=settings.VAE_TRAJECTORY_STEPS,
                            help="samples per trajectory; k = 2 * length (default: %(default)s)")


def register(subparsers):
    vae = subparsers.add_parser("vae", help="variational autoencoder on trajectories")
    actions = vae.add_subparsers(dest="action", required=True)

    p = actions.add_parser("train", help="train on scripted or tracked trajectories")
    _add_data_arguments(p)
    p.add_argument("--latent-dim", type=int, default=settings.VAE_LATENT_DIM, help="latent dimension d (default: %(default)s)")
    p.add_argument("--hidden", type=int, default=settings.VAE_HIDDEN, help="hidden width h (default: %(default)s)")
    p.add_argument("--sigma-x", type=float, default=settings.VAE_SIGMA_X, help="decoder noise scale (default: %(default)s)")
    p.add_argument("--epochs", type=int, default=settings.VAE_EPOCHS, help="training epochs (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=settings.VAE_BATCH_SIZE, help="minibatch size (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    add_output_arguments(p, "vae.json", tabular=False)
    p.set_defaults(handler=run_train)

    p = actions.add_parser("reconstruct", help="encode and decode trajectories without noise")
    p.add_argument("--params", type=Path, required=True, help="trained parameter document")
    _add_data_arguments(p, with_length=False)
    p.add_argument("--seed", type=int, default=0, help="seed for scripted trajectories (default: %(default)s)")
    p.add_argument("--plot", type=Path, default=None, help="SVG overlay of originals and reconstructions")
    add_output_arguments(p, "reconstructions.csv")
    p.set_defaults(handler=run_reconstruct)

    p = actions.add_parser("generate", help="decode standard-normal latent draws")
    p.add_argument("--params", type=Path, required=True, help="trained parameter document")
    p.add_argument("--count", type=int, default=6, help="trajectories to generate (default: %(default)s)")
    p.add_argument("--noise", action="store_true", help="add decoder noise sigma_X * omega")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--plot", type=Path, default=None, help="SVG of generated trajectories")
    add_output_arguments(p, "generated.csv")
    p.set_defaults(handler=run_generate)
