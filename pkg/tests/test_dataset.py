import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apcsmooth.dataset import (
    AgeGroup,
    ApcDataset,
    aggregate_ages,
    from_frame,
    load_csv,
    log_rates,
    write_csv,
)
from apcsmooth.errors import (
    DuplicateCell,
    IndivisibleSpan,
    LogOfZero,
    MissingCell,
    MissingInput,
    NegativeCount,
    NonpositiveExposure,
    RaggedBins,
    ValidationError,
)

from conftest import make_dataset


def _long_frame(I=12, J=16, width=5, first_age=25, first_period=2006, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(I):
        lo = first_age + width * i
        for j in range(J):
            rows.append((f"{lo}-{lo + width - 1}", first_period + j, int(rng.poisson(40)), float(rng.uniform(1e5, 1e6))))
    return pd.DataFrame(rows, columns=["age_group", "period", "deaths", "population"])


class TestAgeGroup:
    def test_parse_hyphen_and_en_dash(self):
        assert AgeGroup.parse("25-29") == AgeGroup.parse("25–29")
        g = AgeGroup.parse("25–29")
        assert (g.lower, g.upper, g.width, g.label) == (25, 29, 5, "25-29")

    def test_midpoint_convention(self):
        assert AgeGroup.parse("10-14").midpoint == 12.5
        assert AgeGroup.parse("84").midpoint == 84.5

    @pytest.mark.parametrize("bad", ["abc", "30-25", "", "25-"])
    def test_rejects_bad_labels(self, bad):
        with pytest.raises(ValidationError):
            AgeGroup.parse(bad)


class TestLoadCsv:
    def test_paper_dimensions(self, tmp_path):
        df = _long_frame()
        path = tmp_path / "d.csv"
        df.sample(frac=1.0, random_state=1).to_csv(path, index=False)
        data = load_csv(path)
        assert (data.n_ages, data.n_periods, data.ratio) == (12, 16, 5)
        assert data.labels[0] == "25-29" and data.periods[0] == 2006

    def test_single_cell(self, tmp_path):
        path = tmp_path / "one.csv"
        pd.DataFrame({"age_group": ["40-44"], "period": [2010], "deaths": [3], "population": [1000.0]}).to_csv(path, index=False)
        data = load_csv(path)
        assert data.shape == (1, 1)

    def test_missing_cell(self, tmp_path):
        path = tmp_path / "d.csv"
        _long_frame().drop(index=7).to_csv(path, index=False)
        with pytest.raises(MissingCell):
            load_csv(path)

    def test_duplicate_cell(self):
        df = _long_frame(I=2, J=2)
        with pytest.raises(DuplicateCell):
            from_frame(pd.concat([df, df.iloc[[0]]]))

    def test_negative_count(self):
        df = _long_frame(I=2, J=2)
        df.loc[0, "deaths"] = -1
        with pytest.raises(NegativeCount):
            from_frame(df)

    def test_nonpositive_exposure(self):
        df = _long_frame(I=2, J=2)
        df.loc[3, "population"] = 0.0
        with pytest.raises(NonpositiveExposure):
            from_frame(df)

    def test_ragged_bins(self):
        df = pd.DataFrame({
            "age_group": ["10-14", "15-19", "20-29"] * 1, "period": [2000] * 3,
            "deaths": [1, 2, 3], "population": [1e3] * 3,
        })
        with pytest.raises(RaggedBins):
            from_frame(df)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingInput):
            load_csv(tmp_path / "nope.csv")

    def test_custom_schema(self):
        df = _long_frame(I=2, J=3).rename(columns={"deaths": "y", "population": "N"})
        data = from_frame(df, {"deaths": "y", "population": "N"})
        assert data.shape == (2, 3)

    def test_round_trip(self, tmp_path):
        data = from_frame(_long_frame(I=4, J=5))
        path = tmp_path / "rt.csv"
        write_csv(data, path)
        assert load_csv(path) == data

    def test_arrays_read_only(self):
        data = from_frame(_long_frame(I=2, J=2))
        with pytest.raises(ValueError):
            data.counts[0, 0] = 5


class TestAggregate:
    def test_paper_midpoints(self):
        counts = np.ones((75, 3), dtype=int)
        single = make_dataset(counts, first_age=10, width=1)
        agg = aggregate_ages(single, 5)
        assert agg.n_ages == 15
        np.testing.assert_array_equal(agg.midpoints, 12.5 + 5 * np.arange(15))
        assert agg.midpoints[-1] == 82.5

    def test_width_one_is_identity(self):
        single = make_dataset(np.arange(6).reshape(3, 2), first_age=10, width=1)
        assert aggregate_ages(single, 1) == single

    def test_column_sums(self):
        single = make_dataset([[1, 2], [3, 4]], first_age=10, width=1)
        agg = aggregate_ages(single, 2)
        np.testing.assert_array_equal(agg.counts, [[4, 6]])
        assert agg.labels == ["10-11"]

    def test_indivisible(self):
        single = make_dataset(np.ones((7, 2), dtype=int), width=1)
        with pytest.raises(IndivisibleSpan):
            aggregate_ages(single, 5)

    @given(
        n_blocks=st.integers(1, 6),
        width=st.sampled_from([1, 2, 3, 5]),
        J=st.integers(1, 5),
        seed=st.integers(0, 10_000),
    )
    @settings(max_examples=40, deadline=None)
    def test_conserves_totals(self, n_blocks, width, J, seed):
        rng = np.random.default_rng(seed)
        counts = rng.poisson(20, size=(n_blocks * width, J))
        expo = rng.uniform(1.0, 1e4, size=counts.shape)
        single = make_dataset(counts, expo, width=1)
        agg = aggregate_ages(single, width)
        assert agg.counts.sum() == counts.sum()
        assert math.isclose(agg.exposures.sum(), expo.sum(), rel_tol=1e-12)


class TestLogRates:
    def test_zero_count_with_correction(self):
        data = make_dataset([[0]], [[750000.0]])
        assert log_rates(data).values[0, 0] == pytest.approx(math.log(0.5 / 750000), abs=1e-12)
        assert log_rates(data).values[0, 0] == pytest.approx(-14.22098, abs=1e-5)

    def test_rate_of_one(self):
        data = make_dataset([[250]], [[250.0]])
        assert log_rates(data, 0.0).values[0, 0] == 0.0

    def test_direct_evaluation(self):
        data = make_dataset([[46]], [[750000.0]])
        assert log_rates(data).values[0, 0] == pytest.approx(math.log(46.5 / 750000), rel=1e-15)

    def test_log_of_zero(self):
        with pytest.raises(LogOfZero):
            log_rates(make_dataset([[0, 1]]), 0.0)

    def test_negative_correction(self):
        with pytest.raises(ValidationError):
            log_rates(make_dataset([[1]]), -0.1)

    @given(st.lists(st.integers(0, 10_000), min_size=2, max_size=20, unique=True), st.floats(0.01, 5.0))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_counts(self, counts, c):
        counts = sorted(counts)
        data = make_dataset(np.array(counts)[None, :], np.full((1, len(counts)), 1e4))
        assert np.all(np.diff(log_rates(data, c).values[0]) > 0)


def test_dataset_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        ApcDataset(["10-14"], [2000, 2001], [[1, 2]], [[1.0]])
