"""
Tracking-data commands: simulate, filter, estimate, predict, kinematics.
"""
from pathlib import Path

import numpy as np

from app.commands import (
    CommandOutcome,
    add_input_arguments,
    add_model_arguments,
    add_output_arguments,
    input_paths,
    load_tracking,
    model_from_args,
    select_entity,
)
from app.config import settings
from app.services.errors import DataError
from app.services.estimation import (
    ESTIMATE_COLUMNS,
    STACKED_ESTIMATE_COLUMNS,
    FitConfig,
    estimate_rows,
    fit_mle,
    sliding_window_fit,
    sliding_window_fit_all,
    stacked_estimate_rows,
)
from app.services.kalman import INIT_MODES, DiffuseInit, FilterState, filter_pass, filter_result_rows, univariate_filter_pass
from app.services.plotting import renderer
from app.services.prediction import PREDICTION_COLUMNS, kinematics, predict_k, prediction_rows
from app.services.state_space import PARAM_MODES, build_single, model_to_json, stack
from app.services.storage import storage
from app.services.synthetic import simulate
from app.services.trajectory_data import (
    MAX_ENTITY_ID,
    FieldSpec,
    longest_stretch,
    serialize_tracking_csv,
    stack_observations,
)
from app.utils.file_utils import sibling_path
from app.utils.logger import app_logger, estimation_logger


FILTER_COLUMNS = ("t", "entity", "x", "y", "vx", "vy") + tuple(
    f"p{i + 1}{j + 1}" for i in range(4) for j in range(i + 1)
)
KINEMATICS_COLUMNS = ("t", "vx", "vy", "speed")
MAX_PLOTTED_WINDOWS = 200
STACKED_PREDICTION_COLUMNS = ("t", "entity") + PREDICTION_COLUMNS[1:]


def simulation_entity_ids(count: int) -> list:
    """1 -> [1]; 23 -> ball and players 0..22; otherwise players 1..count."""
    if count == 1:
        return [1]
    if count == MAX_ENTITY_ID + 1:
        return list(range(MAX_ENTITY_ID + 1))
    if not 1 <= count <= MAX_ENTITY_ID:
        raise DataError(f"--entities must be between 1 and {MAX_ENTITY_ID + 1}, got {count}")
    return list(range(1, count + 1))


def run_simulate(args) -> CommandOutcome:
    if args.steps < 1:
        raise DataError(f"--steps must be at least 1, got {args.steps}")
    entity_ids = simulation_entity_ids(args.entities)
    single = build_single(args.dt, args.q * np.eye(2), (args.sigma, args.sigma))
    model = stack([single] * len(entity_ids))

    field = FieldSpec()
    center = np.array([(field.x_min + field.x_max) / 2, (field.y_min + field.y_max) / 2, 0.0, 0.0])
    scenario = simulate(model, args.steps, seed=args.seed, init_state=np.tile(center, len(entity_ids)),
                        measurement_noise=not args.no_noise)

    points = scenario.observations.reshape(args.steps, -1, 2)
    if not field.contains(points, settings.FIELD_TOLERANCE_CM).all():
        raise DataError("Simulated path leaves the field; lower --q or --steps")

    path = storage.write_text(args.output, serialize_tracking_csv(scenario.to_series(entity_ids)))
    app_logger.info(f"Simulated {len(entity_ids)} entities over {args.steps} steps -> {path}")
    return CommandOutcome(output=path, outputs=[path], seed=args.seed)


def _init_from_args(args, state_dim: int) -> DiffuseInit:
    return DiffuseInit.diffuse(state_dim, mode=args.init, kappa=args.kappa)


def _fitted_or_given_model(args, series):
    """--fit estimates (Q, sigma) on the longest gap-free stretch; else --q/--sigma/--model."""
    if not getattr(args, "fit", False):
        return model_from_args(args), None
    window = longest_stretch(series)
    fit = fit_mle(window, args.dt, config=FitConfig(mode=args.mode))
    estimation_logger.info(
        f"Fitted entity {series.entity_id} on {window.length} samples: loglik {fit.loglik:.3f}",
        extra={"entity_id": series.entity_id, "loglik": fit.loglik, "converged": fit.converged},
    )
    return fit.model(args.dt), fit


def run_filter(args) -> CommandOutcome:
    tracking = load_tracking(args)
    outputs = []
    if args.all_entities:
        ids = sorted(tracking)
        model = stack([model_from_args(args)] * len(ids))
        observations = stack_observations(tracking[i] for i in ids)
    else:
        series = select_entity(tracking, args.entity)
        single, fit = _fitted_or_given_model(args, series)
        if fit is not None:
            outputs.append(storage.write_json(sibling_path(args.output, ".model.json"), model_to_json(single)))
        ids, model, observations = [args.entity], single, series.samples

    run = univariate_filter_pass if args.univariate else filter_pass
    result = run(model, observations, _init_from_args(args, model.state_dim))
    path = storage.write_table(args.output, filter_result_rows(result, ids), FILTER_COLUMNS, args.format)
    app_logger.info(f"Filtered {len(ids)} entities, loglik {result.loglik:.3f}, {result.n_diffuse} diffuse steps")
    return CommandOutcome(output=path, outputs=[path] + outputs, inputs=input_paths(args))


def _window_length(args) -> int:
    """--window, defaulting to the stacked length under --all-entities."""
    if args.window is None:
        args.window = settings.ALL_ENTITY_WINDOW_LENGTH if args.all_entities else settings.WINDOW_LENGTH
    return args.window


def _stacked_estimates(args, tracking):
    if args.warm_start or getattr(args, "executor", "local") != "local":
        raise DataError("--all-entities runs locally without --warm-start")
    return sliding_window_fit_all([tracking[i] for i in sorted(tracking)], _window_length(args),
                                  config=FitConfig(mode=args.mode))


def run_estimate(args) -> CommandOutcome:
    tracking = load_tracking(args)
    if args.all_entities:
        estimates = _stacked_estimates(args, tracking)
        rows, columns = stacked_estimate_rows(estimates), STACKED_ESTIMATE_COLUMNS
        ids = list(estimates.entity_ids)
        entity = args.entity if args.entity in ids else ids[0]
        predicted = estimates.predictions[:, ids.index(entity)]
    else:
        entity = args.entity
        estimates = sliding_window_fit(
            select_entity(tracking, entity), _window_length(args), config=FitConfig(mode=args.mode),
            warm_start=args.warm_start, executor=args.executor,
        )
        rows, columns = estimate_rows(estimates), ESTIMATE_COLUMNS
        predicted = estimates.predictions
    path = storage.write_table(args.output, rows, columns, args.format)
    app_logger.info(
        f"Estimated {len(estimates)} windows ({estimates.n_failed} failed), "
        f"one-step RMSE {estimates.prediction_rmse:.3f} cm"
    )
    outputs = [path]
    if args.plot is not None:
        svg = renderer.one_step_overlay(tracking[entity].samples, predicted[~np.isnan(predicted).any(axis=1)],
                                        title=f"One-step prediction, entity {entity}")
        outputs.append(storage.write_svg(args.plot, svg))
    return CommandOutcome(output=path, outputs=outputs, inputs=input_paths(args))


def _stacked_predictions(args, tracking, plotted_entity: int):
    """Rows for every entity of every stacked window, plus the plotted entity's forecasts."""
    estimates = _stacked_estimates(args, tracking)
    ids = list(estimates.entity_ids)
    index = ids.index(plotted_entity) if plotted_entity in ids else 0

    rows, plotted = [], []
    stride = max(1, len(estimates) // MAX_PLOTTED_WINDOWS)
    for i, w in enumerate(estimates.windows):
        if w.failed:
            continue
        origin = w.window_start + args.window - 1
        state = FilterState(Z=w.filtered_means[-1], P=w.filtered_covs[-1], t=origin)
        predictions = predict_k(w.model(estimates.dt), state, args.horizon)
        for k, entity_id in enumerate(ids):
            rows.extend({"entity": entity_id, **row} for row in prediction_rows(predictions, origin, entity=k))
        if i % stride == 0:
            plotted.append(predictions[-1].entity(index))
    return rows, plotted, ids[index]


def _single_predictions(args, series):
    estimates = sliding_window_fit(series, _window_length(args), config=FitConfig(mode=args.mode),
                                   warm_start=args.warm_start)
    rows, plotted = [], []
    stride = max(1, len(estimates) // MAX_PLOTTED_WINDOWS)
    for i, w in enumerate(estimates.windows):
        if w.failed:
            continue
        origin = w.window_start + args.window - 1
        state = FilterState(Z=w.filtered_means[-1], P=w.filtered_covs[-1], t=origin)
        predictions = predict_k(w.fit.model(series.dt), state, args.horizon)
        rows.extend(prediction_rows(predictions, origin))
        if i % stride == 0:
            plotted.append(predictions[-1])
    return rows, plotted


def run_predict(args) -> CommandOutcome:
    tracking = load_tracking(args)
    if args.all_entities:
        rows, plotted, entity = _stacked_predictions(args, tracking, args.entity)
        columns = STACKED_PREDICTION_COLUMNS
    else:
        entity = args.entity
        rows, plotted = _single_predictions(args, select_entity(tracking, entity))
        columns = PREDICTION_COLUMNS

    path = storage.write_table(args.output, rows, columns, args.format)
    outputs = [path]
    if args.plot is not None:
        svg = renderer.prediction_overlay(tracking[entity].samples, plotted,
                                          title=f"{args.horizon}-step prediction, entity {entity}")
        outputs.append(storage.write_svg(args.plot, svg))
    return CommandOutcome(output=path, outputs=outputs, inputs=input_paths(args))


def filtered_kinematics(args):
    """Filter one entity and return (series, model, filter result, KinematicsSeries)."""
    series = select_entity(load_tracking(args), args.entity)
    model, _ = _fitted_or_given_model(args, series)
    result = filter_pass(model, series.samples, _init_from_args(args, model.state_dim))
    return series, model, result, kinematics([r.filtered for r in result.records])


def run_kinematics(args) -> CommandOutcome:
    series, _, result, kin = filtered_kinematics(args)
    rows = [
        {"t": t, "vx": v[0], "vy": v[1], "speed": s}
        for t, (v, s) in enumerate(zip(kin.velocity, kin.speed))
    ]
    path = storage.write_table(args.output, rows, KINEMATICS_COLUMNS, args.format)
    outputs = [path]
    if args.plot is not None:
        outputs.append(storage.write_svg(args.plot, renderer.speed_series(series.times, kin.speed,
                                                                         title=f"Speed, entity {args.entity}")))
    return CommandOutcome(output=path, outputs=outputs, inputs=input_paths(args))


def add_filter_arguments(parser):
    add_model_arguments(parser)
    parser.add_argument("--fit", action="store_true", help="estimate Q and sigma on the longest gap-free stretch first")
    parser.add_argument("--mode", choices=PARAM_MODES, default=settings.PARAM_MODE,
                        help="parameterization used by --fit (default: %(default)s)")
    parser.add_argument("--init", choices=INIT_MODES, default=settings.INIT_MODE,
                        help="initialization (default: %(default)s)")
    parser.add_argument("--kappa", type=float, default=settings.DEFAULT_KAPPA,
                        help="diffuse variance for large-kappa init (default: %(default)s)")


def _add_window_arguments(parser):
    parser.add_argument("--window", type=int, default=None,
                        help=f"samples fitted per window (default: {settings.WINDOW_LENGTH}, "
                             f"{settings.ALL_ENTITY_WINDOW_LENGTH} with --all-entities)")
    parser.add_argument("--all-entities", action="store_true",
                        help="fit every entity with its own Q and sigma and predict them jointly")
    parser.add_argument("--mode", choices=PARAM_MODES, default=settings.PARAM_MODE,
                        help="Q parameterization (default: %(default)s)")
    parser.add_argument("--warm-start", action="store_true", default=settings.WARM_START,
                        help="start each window from the previous optimum")


def register(subparsers):
    p = subparsers.add_parser("simulate", help="simulate tracking data from the state-space model")
    p.add_argument("--entities", type=int, default=1, help="number of entities (default: %(default)s)")
    p.add_argument("--steps", type=int, default=100, help="samples per entity (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    p.add_argument("--q", type=float, default=400.0, help="acceleration variance per axis (default: %(default)s)")
    p.add_argument("--sigma", type=float, default=10.0, help="measurement noise std dev in cm (default: %(default)s)")
    p.add_argument("--dt", type=float, default=settings.SAMPLE_DT, help="sampling interval (default: %(default)s)")
    p.add_argument("--no-noise", action="store_true", help="record exact positions")
    add_output_arguments(p, "sim.csv", tabular=False)
    p.set_defaults(handler=run_simulate)

    p = subparsers.add_parser("filter", help="run the Kalman filter over tracking data")
    add_input_arguments(p)
    add_filter_arguments(p)
    p.add_argument("--all-entities", action="store_true", help="filter all entities as one stacked system")
    p.add_argument("--univariate", action="store_true", help="process observation components one at a time")
    add_output_arguments(p, "filter.csv")
    p.set_defaults(handler=run_filter)

    p = subparsers.add_parser("estimate", help="sliding-window maximum-likelihood estimation")
    add_input_arguments(p)
    _add_window_arguments(p)
    p.add_argument("--executor", choices=("local", "celery"), default=settings.FIT_EXECUTOR,
                   help="where window fits run (default: %(default)s)")
    p.add_argument("--plot", type=Path, default=None, help="SVG overlay of truth and one-step predictions")
    add_output_arguments(p, "estimates.csv")
    p.set_defaults(handler=run_estimate)

    p = subparsers.add_parser("predict", help="k-step predictions with 95%% rectangles")
    add_input_arguments(p)
    _add_window_arguments(p)
    p.add_argument("--horizon", type=int, default=settings.PREDICTION_HORIZON,
                   help="steps ahead (default: %(default)s)")
    p.add_argument("--plot", type=Path, default=None, help="SVG overlay of truth and predictions")
    add_output_arguments(p, "predictions.csv")
    p.set_defaults(handler=run_predict)

    p = subparsers.add_parser("kinematics", help="filtered velocity and speed")
    add_input_arguments(p)
    add_filter_arguments(p)
    p.add_argument("--plot", type=Path, default=None, help="SVG speed series")
    add_output_arguments(p, "kinematics.csv")
    p.set_defaults(handler=run_kinematics)
