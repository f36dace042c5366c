from __future__ import annotations

import json

import numpy as np
import pytest

from capnls.core import (
    Dataset,
    Hyperplane,
    Partition,
    PiecewiseLinearModel,
    ShapeError,
    count_distinct_planes,
    evaluate_in_sample,
    predict,
    validate_model,
)


def two_planes(assignment=None):
    return PiecewiseLinearModel(np.array([0.0, 0.5]), np.array([[1.0], [0.5]]), assignment=assignment)


class TestDataset:
    def test_basic_properties(self):
        data = Dataset(np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 3.0]]), np.array([1.0, 2.0, 3.0]))
        assert (data.n, data.d) == (3, 2)
        assert not data.inputs.flags.writeable

    def test_vector_inputs_become_a_column(self):
        assert Dataset(np.array([1.0, 2.0]), np.array([0.0, 1.0])).d == 1

    @pytest.mark.parametrize(
        "x, y",
        [
            (np.array([[1.0, 2.0]]), np.array([1.0])),  # n < d + 1
            (np.array([[1.0], [0.0]]), np.array([1.0, 2.0])),  # zero input
            (np.array([[1.0], [np.nan]]), np.array([1.0, 2.0])),
            (np.array([[1.0], [2.0]]), np.array([1.0, np.inf])),
        ],
    )
    def test_rejects_invalid(self, x, y):
        with pytest.raises(ValueError):
            Dataset(x, y)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            Dataset(np.ones((3, 1)), np.ones(2))
        with pytest.raises(ShapeError):
            Dataset(np.ones((3, 1)), np.ones(3), true_frontier=np.ones(2))

    def test_subset_keeps_frontier(self):
        data = Dataset(np.arange(1.0, 5.0)[:, None], np.arange(4.0), np.arange(4.0) + 10)
        sub = data.subset([1, 3])
        np.testing.assert_array_equal(sub.true_frontier, [11.0, 13.0])
        np.testing.assert_array_equal(data.with_outputs(np.zeros(4)).outputs, 0.0)


class TestPartition:
    def test_every_region_needs_members(self):
        with pytest.raises(ValueError):
            Partition(np.array([0, 0, 2]), 3)

    def test_min_region_size(self):
        with pytest.raises(ValueError):
            Partition(np.array([0, 0, 1]), 2, min_region_size=2)
        assert list(Partition(np.array([0, 1, 1, 0]), 2, 2).sizes) == [2, 2]

    def test_constructors(self):
        assert Partition.single(4).K == 1
        assert list(Partition.identity(3).assignment) == [0, 1, 2]


class TestEvaluation:
    def test_single_plane(self):
        data = Dataset(np.array([[1.0], [2.0]]), np.array([2.0, 4.0]))
        model = PiecewiseLinearModel(np.array([0.0]), np.array([[2.0]]), assignment=np.array([0, 0]))
        np.testing.assert_allclose(evaluate_in_sample(model, data), [2.0, 4.0])

    def test_crossing_point_assignment(self):
        data = Dataset(np.array([[1.0], [3.0]]), np.array([1.0, 2.0]))
        model = two_planes(np.array([0, 1]))
        np.testing.assert_allclose(evaluate_in_sample(model, data), [1.0, 2.0])
        # at x = 1 the second plane gives 1.0 as well: the Afriat row is tight
        assert model.plane_values(np.array([[1.0]]))[0, 1] == pytest.approx(1.0)
        assert validate_model(model, data).max_afriat_violation <= 1e-12

    def test_envelope(self):
        assert predict(two_planes(), np.array([2.0]))[0] == pytest.approx(1.5)
        assert predict(two_planes(), np.array([[0.5], [2.0]])).tolist() == pytest.approx([0.5, 1.5])

    def test_single_plane_predicts_its_value(self):
        model = PiecewiseLinearModel(np.array([0.3]), np.array([[1.0, 2.0]]))
        assert model.predict(np.array([1.0, 1.0]))[0] == pytest.approx(3.3)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            predict(two_planes(), np.ones((2, 3)))
        data = Dataset(np.array([[1.0], [2.0], [3.0]]), np.zeros(3))
        with pytest.raises(ShapeError):
            evaluate_in_sample(two_planes(np.array([0, 1])), data)


class TestValidation:
    def test_negative_slope_flags_monotonicity(self):
        model = PiecewiseLinearModel(np.array([1.0]), np.array([[-0.5]]), assignment=np.array([0, 0]))
        diag = validate_model(model, Dataset(np.array([[1.0], [2.0]]), np.array([0.5, 0.0])))
        assert not diag.monotone and not diag.ok

    def test_infeasible_assignment_is_reported(self):
        data = Dataset(np.array([[3.0], [1.0]]), np.array([1.0, 1.0]))
        # x=3 assigned to the steeper plane, which lies above the other one there
        diag = validate_model(two_planes(np.array([0, 1])), data)
        assert diag.max_afriat_violation == pytest.approx(1.0)
        assert not diag.afriat_feasible

    def test_learning_mse_recomputed(self):
        data = Dataset(np.array([[1.0], [3.0]]), np.array([1.5, 2.0]))
        model = PiecewiseLinearModel(
            np.array([0.0, 0.5]), np.array([[1.0], [0.5]]), assignment=np.array([0, 1]), learning_mse=0.125
        )
        diag = validate_model(model, data)
        assert diag.learning_mse == pytest.approx(0.125, rel=1e-10)
        assert diag.ok


class TestSerialization:
    def test_round_trip_and_field_order(self):
        model = two_planes(np.array([0, 1, 1]))
        doc = json.loads(model.to_json())
        assert list(doc) == ["K", "hyperplanes", "assignment", "learning_mse"]
        back = PiecewiseLinearModel.from_json(model.to_json())
        np.testing.assert_array_equal(back.slopes, model.slopes)
        np.testing.assert_array_equal(back.assignment, model.assignment)

    def test_hyperplanes_view(self):
        planes = two_planes().hyperplanes
        assert planes[1] == Hyperplane(0.5, (0.5,))
        assert planes[1](np.array([2.0])) == pytest.approx(1.5)


def test_count_distinct_planes():
    b0 = np.array([0.0, 0.0, 1.0, 1.0 + 1e-9])
    b = np.array([[1.0], [1.0], [0.0], [0.0]])
    assert count_distinct_planes(b0, b) == 2
