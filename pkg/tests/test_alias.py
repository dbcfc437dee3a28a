import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ppgsmooth import AllWeightsZeroError, NegativeWeightError, RngStream, alias_draw, build_alias

weights = st.lists(st.floats(0.0, 1e3, allow_nan=False), min_size=1, max_size=80).filter(
    lambda w: sum(w) > 0
)


class TestConstruction:
    @given(weights)
    def test_encodes_normalised_weights(self, w):
        w = np.asarray(w)
        table = build_alias(w)
        np.testing.assert_allclose(table.probabilities(), w / w.sum(), atol=1e-12)

    @given(weights)
    def test_table_entries_valid(self, w):
        table = build_alias(w)
        assert np.all((table.prob >= 0) & (table.prob <= 1 + 1e-12))
        assert np.all((table.alias >= 0) & (table.alias < len(w)))

    @pytest.mark.parametrize(
        "w, expected",
        [([1.0], [1.0]), ([2.0, 2.0], [0.5, 0.5]), ([3.0, 1.0], [0.75, 0.25]), ([0.0, 5.0], [0.0, 1.0])],
    )
    def test_small_examples(self, w, expected):
        np.testing.assert_allclose(build_alias(w).probabilities(), expected, atol=1e-15)

    def test_zero_weight_never_drawn(self):
        table = build_alias([0.0, 5.0])
        draws = table.sample(RngStream(0), 10_000)
        assert np.all(draws == 1)

    def test_large_skewed(self):
        w = np.r_[1e6, np.ones(999)]
        np.testing.assert_allclose(build_alias(w).probabilities(), w / w.sum(), atol=1e-12)

    @pytest.mark.parametrize("w", [[1.0, -0.5], [np.nan, 1.0], [np.inf, 1.0]])
    def test_invalid_weights(self, w):
        with pytest.raises(NegativeWeightError):
            build_alias(w)

    @pytest.mark.parametrize("w", [[0.0, 0.0], []])
    def test_no_mass(self, w):
        with pytest.raises(AllWeightsZeroError):
            build_alias(w)


class TestSampling:
    @pytest.mark.parametrize("n", [5, 200])
    def test_chi_square(self, n):
        w = RngStream(n).random(n) ** 2
        draws = build_alias(w).sample(RngStream(1, (n,)), 200_000)
        expected = 200_000 * w / w.sum()
        assert stats.chisquare(np.bincount(draws, minlength=n), expected).pvalue > 1e-3

    def test_scalar_draw(self):
        table = build_alias([1.0, 2.0, 3.0])
        i = alias_draw(table, RngStream(4))
        assert isinstance(i, int) and 0 <= i < 3

    def test_reproducible(self):
        table = build_alias(np.arange(1.0, 50.0))
        np.testing.assert_array_equal(table.sample(RngStream(8), 100), table.sample(RngStream(8), 100))
