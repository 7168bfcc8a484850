"""
Tests for tracking CSV ingestion, windowing and normalization.
"""
import numpy as np
import pytest

from app.services.errors import DataError
from app.services.trajectory_data import (
    FieldSpec,
    TrackingSeries,
    gap_free_stretches,
    longest_stretch,
    normalize_points,
    normalize_unit,
    denormalize,
    parse_tracking_csv,
    serialize_tracking_csv,
    sliding_windows,
    stack_observations,
    stacked_sliding_windows,
)


HEADER = "frame,entity_id,x_cm,y_cm\n"


class TestParse:
    def test_two_entities_share_time_axis(self):
        text = HEADER + "0,1,0.0,0.0\n0,2,10.0,5.0\n1,1,1.0,0.5\n2,1,2.0,1.0\n2,2,12.0,6.0\n"
        series = parse_tracking_csv(text)

        assert list(series) == [1, 2]
        assert len(series[1]) == len(series[2]) == 3
        np.testing.assert_array_equal(series[1].samples[2], [2.0, 1.0])
        assert series[2].present.tolist() == [True, False, True]

    def test_out_of_bounds_names_line(self):
        text = HEADER + "0,1,0,0\n1,1,99999,0\n"
        with pytest.raises(DataError, match="out of bounds, line 3"):
            parse_tracking_csv(text)

    def test_tolerance_band_is_accepted(self):
        text = HEADER + "0,1,5300.0,0.0\n"
        series = parse_tracking_csv(text)
        assert series[1].samples[0, 0] == 5300.0

    @pytest.mark.parametrize("row", ["0,1,abc,0", "0,1,2", "0,23,0,0", "-1,1,0,0", "0,1,nan,0"])
    def test_malformed_rows_rejected(self, row):
        with pytest.raises(DataError, match="line 2"):
            parse_tracking_csv(HEADER + row + "\n")

    def test_bad_header(self):
        with pytest.raises(DataError, match="line 1"):
            parse_tracking_csv("t,id,x,y\n0,1,0,0\n")

    def test_duplicate_pair_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            parse_tracking_csv(HEADER + "0,1,0,0\n0,1,1,1\n")

    def test_non_monotone_frames_rejected(self):
        with pytest.raises(DataError, match="non-monotone"):
            parse_tracking_csv(HEADER + "3,1,0,0\n1,1,1,1\n")

    def test_serialize_parses_back(self):
        samples = np.array([[0.1, -3.25], [np.nan, np.nan], [1e-3, 3400.5]])
        original = {7: TrackingSeries(entity_id=7, samples=samples)}
        assert parse_tracking_csv(serialize_tracking_csv(original)) == original


class TestWindows:
    def _series(self, n, missing=()):
        samples = np.column_stack([np.arange(n, dtype=float), np.zeros(n)])
        samples[list(missing)] = np.nan
        return TrackingSeries(entity_id=1, samples=samples)

    def test_eleven_samples_give_one_window_of_eleven(self):
        windows = sliding_windows(self._series(11), 11)
        assert len(windows) == 1
        assert windows[0].start_index == 0
        assert windows[0].length == 11

    def test_windows_skip_gaps(self):
        series = self._series(12, missing=[5])
        windows = sliding_windows(series, 3)
        # stretches [0, 5) and [6, 12)
        assert gap_free_stretches(series) == [(0, 5), (6, 12)]
        assert [w.start_index for w in windows] == [0, 1, 2, 6, 7, 8, 9]
        assert all(not np.isnan(w.points).any() for w in windows)

    def test_short_stretch_contributes_nothing(self):
        assert sliding_windows(self._series(4), 5) == []

    def test_window_length_below_two_rejected(self):
        with pytest.raises(DataError):
            sliding_windows(self._series(5), 1)

    def test_longest_stretch(self):
        window = longest_stretch(self._series(12, missing=[3]))
        assert (window.start_index, window.length) == (4, 8)

    def test_stacked_windows_need_every_entity_present(self):
        first = self._series(10, missing=[2])
        second = TrackingSeries(entity_id=2, samples=self._series(10, missing=[7]).samples + 100.0)
        windows = stacked_sliding_windows([first, second], 3)
        # rows 2 and 7 miss one entity: common stretches [0, 2), [3, 7), [8, 10)
        assert [w.start_index for w in windows] == [3, 4]
        assert windows[0].points.shape == (3, 4)
        np.testing.assert_array_equal(windows[0].points[0], [3.0, 0.0, 103.0, 100.0])

    def test_stacked_windows_reject_mismatched_lengths(self):
        with pytest.raises(DataError):
            stacked_sliding_windows([self._series(10), self._series(9)], 3)


class TestNormalization:
    def test_corners_map_to_unit_square(self):
        field = FieldSpec()
        corners = np.array([[field.x_min, field.y_min], [field.x_max, field.y_max]])
        np.testing.assert_allclose(normalize_points(corners, field), [[0.0, 0.0], [1.0, 1.0]])

    def test_outside_field_rejected_unless_clipped(self):
        field = FieldSpec()
        point = np.array([[field.x_max + 50.0, 0.0]])
        with pytest.raises(DataError):
            normalize_points(point, field)
        assert normalize_points(point, field, clip=True)[0, 0] == 1.0

    def test_denormalize_inverts(self):
        series = TrackingSeries(entity_id=4, samples=[[120.0, -300.0], [np.nan, np.nan], [-5000.0, 3000.0]])
        back = denormalize(normalize_unit(series))
        np.testing.assert_allclose(back.samples, series.samples, atol=1e-9)

    def test_invalid_field(self):
        with pytest.raises(DataError):
            FieldSpec(x_min=1.0, x_max=0.0)


def test_stack_observations_orders_entities():
    a = TrackingSeries(entity_id=1, samples=np.ones((3, 2)))
    b = TrackingSeries(entity_id=2, samples=2 * np.ones((3, 2)))
    stacked = stack_observations([b, a])
    assert stacked.shape == (3, 4)
    np.testing.assert_array_equal(stacked[0], [2.0, 2.0, 1.0, 1.0])

    with pytest.raises(DataError):
        stack_observations([a, TrackingSeries(entity_id=3, samples=np.ones((4, 2)))])
