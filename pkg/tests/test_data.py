import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from rfadjust.data import (
    CSVParseError,
    DataValidationError,
    ResidualVector,
    TrialDataset,
    adjusted_response,
    complete_randomization,
    load_trial_csv,
)


def _ds(R, Z, X=None):
    R = np.asarray(R, dtype=float)
    if X is None:
        X = np.arange(len(R), dtype=float).reshape(-1, 1)
    return TrialDataset(X, R, Z)


class TestAdjustedResponse:
    def test_zero_tau_is_identity(self):
        d = _ds([3, 5, 1, 2], [0, 1, 0, 1])
        np.testing.assert_array_equal(adjusted_response(d, 0), d.outcomes)

    def test_two_point_examples(self):
        d = _ds([3, 5, 7, 9], [0, 1, 0, 1])
        np.testing.assert_array_equal(adjusted_response(d, 2)[:2], [3, 3])

    def test_half_shift(self):
        d = _ds([1, 2, 4, 8], [1, 0, 1, 0])
        np.testing.assert_allclose(adjusted_response(d, 0.5), [0.5, 2, 3.5, 8])

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_tau_rejected(self, bad):
        with pytest.raises(ValueError):
            adjusted_response(_ds([1, 2, 3, 4], [0, 1, 0, 1]), bad)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=12),
           st.floats(-10, 10), st.floats(-10, 10))
    def test_affine_in_tau(self, R, a, b):
        Z = np.arange(len(R)) % 2
        d = _ds(R, Z)
        diff = adjusted_response(d, a) - adjusted_response(d, b)
        np.testing.assert_allclose(diff, (b - a) * Z, atol=1e-9)


class TestTrialDataset:
    def test_rejects_small_n(self):
        with pytest.raises(DataValidationError):
            _ds([1, 2, 3], [0, 1, 0])

    def test_rejects_empty_arm(self):
        with pytest.raises(DataValidationError):
            _ds([1, 2, 3, 4], [1, 1, 1, 1])

    def test_rejects_non_binary(self):
        with pytest.raises(DataValidationError):
            _ds([1, 2, 3, 4], [0, 1, 2, 1])

    def test_rejects_nan(self):
        with pytest.raises(DataValidationError):
            _ds([1, np.nan, 3, 4], [0, 1, 0, 1])

    def test_is_immutable(self):
        d = _ds([1, 2, 3, 4], [0, 1, 0, 1])
        with pytest.raises(ValueError):
            d.outcomes[0] = 5.0

    def test_testable_requires_two_per_arm(self):
        d = _ds([1, 2, 3, 4], [0, 1, 1, 1])
        with pytest.raises(DataValidationError):
            d.require_testable()

    def test_residual_vector_source_checked(self):
        with pytest.raises(ValueError):
            ResidualVector([0.0, 1.0], "magic")


class TestLoadCSV:
    def test_smallest_valid_file(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("y,z,x1\n1.0,0,0.5\n2.0,1,0.1\n3.5,0,-1\n4,1,2\n")
        d = load_trial_csv(f, "y", "z")
        assert (d.n, d.p) == (4, 1)
        assert d.covariate_names == ("x1",)
        np.testing.assert_array_equal(d.assignment, [0, 1, 0, 1])

    def test_covariate_order_preserved(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("b,y,a,z,c\n1,1,2,0,3\n4,2,5,1,6\n7,3,8,0,9\n1,4,1,1,1\n")
        d = load_trial_csv(f, "y", "z")
        assert d.covariate_names == ("b", "a", "c")
        np.testing.assert_array_equal(d.covariates[0], [1, 2, 3])

    def test_assignment_outside_domain(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("y,z,x1\n1,0,0\n2,1,0\n3,2,0\n4,1,0\n")
        with pytest.raises(DataValidationError, match="0/1"):
            load_trial_csv(f, "y", "z")

    def test_blank_cell_reports_location(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("y,z,x1\n1,0,0\n2,1,\n3,0,0\n4,1,0\n")
        with pytest.raises(CSVParseError) as info:
            load_trial_csv(f, "y", "z")
        assert info.value.row == 3
        assert info.value.column == "x1"
        assert "row 3" in str(info.value) and "'x1'" in str(info.value)

    def test_non_numeric_cell(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("y,z,x1\n1,0,0\n2,1,abc\n3,0,0\n4,1,0\n")
        with pytest.raises(CSVParseError, match="non-numeric"):
            load_trial_csv(f, "y", "z")

    def test_missing_column(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("y,x1\n1,0\n2,1\n")
        with pytest.raises(CSVParseError, match="'arm'"):
            load_trial_csv(f, "y", "arm")

    def test_empty_arm(self, tmp_path):
        f = tmp_path / "t.csv"
        f.write_text("y,z,x1\n1,1,0\n2,1,0\n3,1,0\n4,1,0\n")
        with pytest.raises(DataValidationError, match="nonempty"):
            load_trial_csv(f, "y", "z")


class TestCompleteRandomization:
    def test_count_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            assert complete_randomization(6, 3, rng).sum() == 3

    def test_deterministic_given_seed(self):
        a = complete_randomization(20, 7, np.random.default_rng(42))
        b = complete_randomization(20, 7, np.random.default_rng(42))
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("n1", [0, 5, -1, 6])
    def test_invalid_arm_size(self, n1):
        with pytest.raises(ValueError):
            complete_randomization(5, n1, np.random.default_rng(0))

    def test_two_subjects_fair_coin(self):
        rng = np.random.default_rng(7)
        draws = np.array([complete_randomization(2, 1, rng)[0] for _ in range(100_000)])
        counts = np.bincount(draws, minlength=2)
        assert stats.chisquare(counts).pvalue > 0.01

    @pytest.mark.parametrize("n,n1", [(6, 3), (8, 3)])
    def test_uniform_over_all_assignments(self, n, n1):
        rng = np.random.default_rng(11)
        index = {c: k for k, c in enumerate(itertools.combinations(range(n), n1))}
        counts = np.zeros(len(index))
        for _ in range(40 * len(index)):
            z = complete_randomization(n, n1, rng)
            counts[index[tuple(np.flatnonzero(z))]] += 1
        assert stats.chisquare(counts).pvalue > 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(4, 30).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n - 1))))
def test_randomization_sizes(args):
    n, n1 = args
    z = complete_randomization(n, n1, np.random.default_rng(n * 31 + n1))
    assert z.shape == (n,) and z.sum() == n1 and set(np.unique(z)) <= {0, 1}
