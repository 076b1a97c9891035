import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auctionope.core import (
    LoggedDataset,
    LoggedRecord,
    Metric,
    RewardVector,
    Side,
    compute_lift,
    lift_with_ci,
    make_binning,
    mape,
    read_dataset,
    write_dataset,
)
from auctionope.errors import (
    DegenerateActions,
    DimensionMismatch,
    ParseError,
    SchemaError,
    ZeroControl,
    ZeroTruth,
)

from conftest import make_dataset

# --- lift -----------------------------------------------------------------


@pytest.mark.parametrize("t, c, expected", [(110, 100, 10.0), (100, 100, 0.0), (80, 100, -20.0)])
def test_compute_lift_examples(t, c, expected):
    assert compute_lift(t, c) == pytest.approx(expected, abs=1e-12)


def test_compute_lift_zero_control():
    with pytest.raises(ZeroControl):
        compute_lift(1.0, 0.0)


@given(
    st.floats(-1e6, 1e6, allow_nan=False),
    st.floats(1e-3, 1e6, allow_nan=False) | st.floats(-1e6, -1e-3, allow_nan=False),
)
def test_lift_antisymmetry(t, c):
    # mirroring the treatment mean around the control mean flips the lift
    assert compute_lift(t, c) == pytest.approx(-compute_lift(2 * c - t, c), rel=1e-9, abs=1e-6)


def test_lift_with_ci_monte_carlo():
    rng = np.random.default_rng(7)
    t = rng.normal(1.1, 0.1, 1000)
    c = rng.normal(1.0, 0.1, 1000)
    res = lift_with_ci(t, c, metric="returns")
    assert 5.0 <= res.lift_percent <= 15.0
    assert res.p_value < 0.01
    assert res.ci_low < res.lift_percent < res.ci_high


def test_lift_with_ci_matches_welch():
    from scipy import stats

    rng = np.random.default_rng(3)
    t, c = rng.normal(2.0, 1.0, 40), rng.normal(1.8, 2.0, 60)
    res = lift_with_ci(t, c)
    assert res.p_value == pytest.approx(stats.ttest_ind(t, c, equal_var=False).pvalue, rel=1e-10)
    # the interval is the Welch interval of the mean difference over the control mean
    diff = t.mean() - c.mean()
    assert res.ci_low < diff / c.mean() * 100 < res.ci_high


def test_lift_with_ci_constant_samples():
    res = lift_with_ci([2.0, 2.0, 2.0], [1.0, 1.0])
    assert res.lift_percent == 100.0
    assert res.ci_low == res.ci_high == 100.0
    assert res.p_value == 0.0
    same = lift_with_ci([1.0, 1.0], [1.0, 1.0])
    assert same.p_value == 1.0 and same.lift_percent == 0.0


def test_lift_with_ci_identical_samples():
    x = np.random.default_rng(1).normal(5.0, 1.0, 100)
    res = lift_with_ci(x, x.copy())
    assert res.lift_percent == 0.0
    assert res.p_value == pytest.approx(1.0)


# --- mape -------------------------------------------------------------------


def test_mape_examples():
    assert mape([1.1, 0.9], [1.0, 1.0]) == pytest.approx(10.0, abs=1e-12)
    assert mape([2.0], [1.0]) == pytest.approx(100.0)


def test_mape_errors():
    with pytest.raises(ZeroTruth):
        mape([1.0], [0.0])
    with pytest.raises(DimensionMismatch):
        mape([1.0, 2.0], [1.0])


@given(
    st.lists(st.floats(0.1, 100), min_size=1, max_size=10),
    st.floats(1e-3, 1e3),
    st.integers(0, 2**31),
)
def test_mape_scale_invariant(truth, k, seed):
    truth = np.asarray(truth)
    est = truth * np.random.default_rng(seed).uniform(0.5, 1.5, truth.size)
    assert mape(k * est, k * truth) == pytest.approx(mape(est, truth), rel=1e-9)


# --- binning -----------------------------------------------------------------


def test_binning_median_split():
    b = make_binning([1.0, 2.0, 3.0, 4.0], 2)
    assert b.num_bins == 2
    assert b.edges[1] == 2.5
    assert list(b.assign([1.0, 2.0, 3.0, 4.0])) == [0, 0, 1, 1]


def test_binning_equal_counts():
    b = make_binning(np.arange(100.0), 10)
    counts = np.bincount(b.assign(np.arange(100.0)), minlength=10)
    assert list(counts) == [10] * 10


def test_binning_all_equal():
    with pytest.raises(DegenerateActions):
        make_binning([3.0] * 5)


@settings(max_examples=50)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=200), st.integers(2, 12))
def test_binning_assigns_every_action(actions, B):
    a = np.asarray(actions)
    if a.min() == a.max():
        return
    b = make_binning(a, B)
    idx = b.assign(a)
    assert idx.min() >= 0 and idx.max() < b.num_bins
    # ties never straddle an edge
    for v in np.unique(a):
        assert np.unique(idx[a == v]).size == 1


def test_binning_round_trip():
    b = make_binning(np.linspace(0, 1, 37), 5)
    from auctionope.core import BinningScheme

    assert np.array_equal(BinningScheme.from_dict(b.to_dict()).edges, b.edges)


# --- datasets ----------------------------------------------------------------


def test_record_validation():
    with pytest.raises(ValueError):
        LoggedRecord((0.0,), -1.0, RewardVector(0, 0, 0, 0))
    with pytest.raises(ValueError):
        LoggedRecord((0.0,), 1.0, RewardVector(0, 0, 0, 0), logged_propensity=0.0)


def test_dataset_is_read_only(small_dataset):
    with pytest.raises(ValueError):
        small_dataset.actions[0] = 5.0


def test_from_records_round_trip(small_dataset):
    again = LoggedDataset.from_records(small_dataset.records, policy_id="test")
    assert again.equals(small_dataset)


@pytest.mark.parametrize("fmt", ["jsonl", "csv"])
def test_dataset_round_trip(tmp_path, fmt):
    ds = make_dataset(n=30, d=4, seed=2)
    # mix in missing propensities
    props = ds.propensities.copy()
    props[::3] = np.nan
    ds = LoggedDataset(ds.contexts, ds.actions, ds.rewards, props, "p", Side.CONTROL, 4)
    path = write_dataset(ds, tmp_path / f"log.{fmt}")
    back = read_dataset(path, policy_id="p", side="control")
    assert back.equals(ds, atol=1e-12)
    assert np.array_equal(np.isnan(back.propensities), np.isnan(props))


def test_csv_missing_action_column(tmp_path):
    path = tmp_path / "log.csv"
    path.write_text("x0,x1,cost,reach,resources,returns,propensity\n1,2,0,0,0,0,\n")
    with pytest.raises(SchemaError) as err:
        read_dataset(path)
    assert "action" in err.value.missing


def test_jsonl_single_record(tmp_path):
    path = tmp_path / "one.jsonl"
    path.write_text(
        '{"context":[0.5,-1.0],"action":1.2,"cost":1.0,"reach":1.0,"resources":2.0,"returns":3.0,"propensity":null}\n'
    )
    ds = read_dataset(path)
    assert len(ds) == 1 and ds.dimension == 2
    assert math.isnan(ds.propensities[0])
    assert ds.metric(Metric.RESOURCES)[0] == 2.0


def test_jsonl_parse_error_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = '{"context":[0.5],"action":1.0,"cost":0,"reach":0,"resources":0,"returns":0,"propensity":null}'
    path.write_text(good + "\n" + "{not json\n")
    with pytest.raises(ParseError) as err:
        read_dataset(path)
    assert err.value.line == 2


def test_side_inferred_from_file_name(tmp_path):
    ds = make_dataset(n=5)
    path = write_dataset(ds, tmp_path / "test2_treatment.jsonl")
    assert read_dataset(path).side == Side.TREATMENT
