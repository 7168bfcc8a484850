"""
End-to-end tests of the command-line interface.
"""
import csv
import json

import pytest

from app.commands import kalman as kalman_commands
from app.main import main
from app.services.errors import NumericalError
from app.services.estimation import ESTIMATE_COLUMNS, STACKED_ESTIMATE_COLUMNS
from app.services.prediction import PREDICTION_COLUMNS


@pytest.fixture(autouse=True)
def _workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _simulate(tmp_path, steps=16, entities=1, name="sim.csv"):
    out = tmp_path / name
    code = main(["simulate", "--steps", str(steps), "--entities", str(entities), "--seed", "1", "-o", str(out)])
    assert code == 0
    return out


class TestSimulate:
    def test_writes_csv_and_manifest(self, tmp_path):
        out = _simulate(tmp_path, steps=30)

        rows = _rows(out)
        assert len(rows) == 30
        assert list(rows[0]) == ["frame", "entity_id", "x_cm", "y_cm"]

        manifest = json.loads((tmp_path / "sim.csv.manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["seed"] == 1
        assert manifest["flags"]["steps"] == 30
        assert manifest["outputs"] == [str(out)]
        assert manifest["exit_code"] == 0
        assert manifest["error"] is None

    def test_full_match(self, tmp_path):
        out = _simulate(tmp_path, steps=5, entities=23)
        assert {int(r["entity_id"]) for r in _rows(out)} == set(range(23))

    def test_same_seed_same_file(self, tmp_path):
        a = _simulate(tmp_path, name="a.csv")
        b = _simulate(tmp_path, name="b.csv")
        assert a.read_text() == b.read_text()


class TestTrackingCommands:
    def test_estimate(self, tmp_path):
        sim = _simulate(tmp_path)
        out = tmp_path / "estimates.csv"

        assert main(["estimate", "--input", str(sim), "--window", "10", "-o", str(out)]) == 0

        rows = _rows(out)
        assert len(rows) == 6
        assert tuple(rows[0]) == ESTIMATE_COLUMNS
        manifest = json.loads((tmp_path / "estimates.csv.manifest.json").read_text())
        assert str(sim) in manifest["input_digests"]

    def test_predict_with_plot(self, tmp_path):
        sim = _simulate(tmp_path, steps=14)
        out, figure = tmp_path / "pred.csv", tmp_path / "pred.svg"

        code = main(["predict", "--input", str(sim), "--window", "10", "--horizon", "3",
                     "--plot", str(figure), "-o", str(out)])

        assert code == 0
        rows = _rows(out)
        assert len(rows) == 4 * 3
        assert tuple(rows[0]) == PREDICTION_COLUMNS
        assert [int(r["horizon"]) for r in rows[:3]] == [1, 2, 3]
        assert figure.read_text().lstrip().startswith("<?xml")

    def test_estimate_with_one_step_plot(self, tmp_path):
        sim = _simulate(tmp_path)
        figure = tmp_path / "one_step.svg"

        assert main(["estimate", "--input", str(sim), "--plot", str(figure), "-o", str(tmp_path / "e.csv")]) == 0
        assert "one-step prediction" in figure.read_text()

    def test_estimate_all_entities(self, tmp_path):
        sim = _simulate(tmp_path, steps=8, entities=3)
        out = tmp_path / "estimates.csv"

        assert main(["estimate", "--input", str(sim), "--all-entities", "-o", str(out)]) == 0

        rows = _rows(out)
        assert tuple(rows[0]) == STACKED_ESTIMATE_COLUMNS
        assert [(r["window_start"], r["entity"]) for r in rows[:3]] == [("0", "1"), ("0", "2"), ("0", "3")]
        assert len(rows) == 3 * 3
        manifest = json.loads((tmp_path / "estimates.csv.manifest.json").read_text())
        assert manifest["flags"]["window"] == 5

    def test_predict_all_entities_with_plot(self, tmp_path):
        sim = _simulate(tmp_path, steps=7, entities=2)
        out, figure = tmp_path / "pred.csv", tmp_path / "pred.svg"

        code = main(["predict", "--input", str(sim), "--all-entities", "--entity", "2", "--horizon", "2",
                     "--plot", str(figure), "-o", str(out)])

        assert code == 0
        rows = _rows(out)
        assert tuple(rows[0]) == kalman_commands.STACKED_PREDICTION_COLUMNS
        assert {r["entity"] for r in rows} == {"1", "2"}
        assert len(rows) % (2 * 2) == 0 and rows
        assert "entity 2" in figure.read_text()

    def test_all_entities_rejects_warm_start(self, tmp_path):
        sim = _simulate(tmp_path, steps=8, entities=2)
        assert main(["estimate", "--input", str(sim), "--all-entities", "--warm-start",
                     "-o", str(tmp_path / "e.csv")]) == 2

    def test_filter_single_entity_json(self, tmp_path):
        sim = _simulate(tmp_path, steps=12)
        out = tmp_path / "filter.json"

        assert main(["filter", "--input", str(sim), "--q", "400", "--sigma", "10",
                     "--format", "json", "-o", str(out)]) == 0

        records = json.loads(out.read_text())
        assert len(records) == 12
        assert records[0]["entity"] == 1
        assert "p44" in records[0]

    def test_filter_all_entities_univariate(self, tmp_path):
        sim = _simulate(tmp_path, steps=10, entities=3)
        out = tmp_path / "filter.csv"

        assert main(["filter", "--input", str(sim), "--all-entities", "--univariate", "-o", str(out)]) == 0
        assert len(_rows(out)) == 30

    def test_filter_with_fit_writes_model(self, tmp_path):
        sim = _simulate(tmp_path, steps=30)
        out = tmp_path / "filter.csv"

        assert main(["filter", "--input", str(sim), "--fit", "-o", str(out)]) == 0
        model = json.loads((tmp_path / "filter.model.json").read_text())
        assert model["dt"] == 0.1
        assert len(model["Q"]) == 2

    def test_kinematics(self, tmp_path):
        sim = _simulate(tmp_path, steps=20)
        out, figure = tmp_path / "kin.csv", tmp_path / "speed.svg"

        assert main(["kinematics", "--input", str(sim), "--plot", str(figure), "-o", str(out)]) == 0
        rows = _rows(out)
        assert len(rows) == 20
        assert all(float(r["speed"]) >= 0 for r in rows)
        assert figure.exists()

    @pytest.mark.parametrize("kind", ["tracks", "one-step", "prediction", "velocity", "speed"])
    def test_plot(self, tmp_path, kind):
        sim = _simulate(tmp_path, steps=20)
        out = tmp_path / f"{kind}.svg"
        assert main(["plot", "--input", str(sim), "--kind", kind, "-o", str(out)]) == 0
        assert "<svg" in out.read_text()


class TestVaeCommands:
    def test_train_reconstruct_generate(self, tmp_path):
        params = tmp_path / "vae.json"
        code = main(["vae", "train", "--scripted", "6", "--length", "10", "--latent-dim", "2",
                     "--hidden", "8", "--epochs", "2", "--batch-size", "3", "-o", str(params)])
        assert code == 0
        assert len(_rows(tmp_path / "vae.history.csv")) == 2

        recon = tmp_path / "recon.csv"
        assert main(["vae", "reconstruct", "--params", str(params), "--scripted", "4", "-o", str(recon)]) == 0
        assert len(_rows(recon)) == 4 * 10
        metrics = json.loads((tmp_path / "recon.metrics.json").read_text())
        assert set(metrics) == {"mean_abs_dev", "mean_sq_err", "mean_max_err"}

        generated = tmp_path / "gen.csv"
        assert main(["vae", "generate", "--params", str(params), "--count", "6", "-o", str(generated)]) == 0
        assert {int(r["trajectory"]) for r in _rows(generated)} == set(range(6))
        manifest = json.loads((tmp_path / "gen.csv.manifest.json").read_text())
        assert manifest["command"] == "vae generate"

    def test_invalid_configuration_exits_2(self, tmp_path):
        code = main(["vae", "train", "--scripted", "4", "--length", "10", "--sigma-x", "-1",
                     "-o", str(tmp_path / "vae.json")])
        assert code == 2


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        assert main(["estimate", "--bogus"]) == 1

    def test_missing_subcommand_is_usage_error(self):
        assert main([]) == 1

    def test_missing_input_is_data_error(self, tmp_path):
        assert main(["estimate", "--input", str(tmp_path / "absent.csv")]) == 2

    def test_out_of_bounds_input_is_data_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("frame,entity_id,x_cm,y_cm\n0,1,0,0\n1,1,99999,0\n")

        assert main(["filter", "--input", str(bad), "-o", str(tmp_path / "f.csv")]) == 2
        assert "out of bounds, line 3" in capsys.readouterr().err

    def test_failed_run_still_writes_manifest(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("frame,entity_id,x_cm,y_cm\n0,1,0,0\n1,1,99999,0\n")

        assert main(["filter", "--input", str(bad), "-o", str(tmp_path / "f.csv")]) == 2

        manifest = json.loads((tmp_path / "f.csv.manifest.json").read_text())
        assert manifest["exit_code"] == 2
        assert "out of bounds" in manifest["error"]
        assert manifest["outputs"] == []
        assert str(bad) in manifest["input_digests"]
        assert not (tmp_path / "f.csv").exists()

    def test_numerical_failure_exits_3(self, tmp_path, monkeypatch):
        sim = _simulate(tmp_path, steps=10)

        def singular(*args, **kwargs):
            raise NumericalError("Innovation covariance F_t is numerically singular", module="kalman", step=4)

        monkeypatch.setattr(kalman_commands, "filter_pass", singular)
        assert main(["filter", "--input", str(sim), "-o", str(tmp_path / "f.csv")]) == 3

    def test_help_lists_defaults(self, capsys):
        assert main(["estimate", "--help"]) == 0
        assert "default: 10" in capsys.readouterr().out
