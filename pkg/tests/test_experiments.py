import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lilanet import experiments as ex
from lilanet import model as mdl
from lilanet import synthetic
from lilanet.model import ConfigError, ModelConfig
from lilanet.training import TrainConfig

from helpers import TINY

FAST = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3)


def tiny_cfg(M=32):
    return ModelConfig(**{**TINY, "points": M})


def test_distribution_box_plot():
    d = ex.Distribution.of([1, 2, 3, 4, 100])
    assert (d.q1, d.median, d.q3) == (2, 3, 4)
    assert (d.whisker_low, d.whisker_high) == (1, 4)
    assert d.outliers == [100] and d.mean == 22


def test_distribution_nan_propagates():
    d = ex.Distribution.of([1.0, float("nan")])
    assert math.isnan(d.mean) and math.isnan(d.median) and d.outliers == []


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=30))
def test_distribution_median_within_iqr(values):
    d = ex.Distribution.of(values)
    assert d.q1 <= d.median <= d.q3
    assert d.whisker_low <= d.median <= d.whisker_high
    iqr = d.q3 - d.q1
    assert all(o < d.q1 - 1.5 * iqr or o > d.q3 + 1.5 * iqr for o in d.outliers)
    assert len(d.outliers) < len(values)


def test_spec_validation_and_desk():
    ex.ExperimentSpec().validate()
    desk = ex.ExperimentSpec.desk("data_fraction")
    assert desk.repeats == 5 and desk.fractions == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert desk.cloud_sizes == [256, 1024, 4096]
    with pytest.raises(ConfigError) as err:
        ex.ExperimentSpec(fractions=[0.0]).validate()
    assert err.value.field == "fractions"
    with pytest.raises(ConfigError):
        ex.ExperimentSpec(kind="other").validate()


def test_paper_scale_defaults():
    spec = ex.ExperimentSpec()
    assert spec.fractions == [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
    assert spec.repeats == 50 and spec.cloud_sizes == [2048, 8192, 20000]


def test_skip_ablation_rows():
    data = synthetic.toy_dataset(8, 32, seed=0)
    rows = ex.run_skip_ablation(data[:6], data[6:], tiny_cfg(), FAST, ["ss1", "ss2", "ss3", "ss4"],
                                emd_mode="exact")
    assert [r.variant for r in rows] == ["ss1", "ss2", "ss3", "ss4"]
    for r in rows:
        assert r.param_count == mdl.param_count(ModelConfig(**{**TINY, "skip": r.variant}))
        assert all(np.isfinite([r.cd_true, r.emd_true, r.cd_random, r.emd_random]))
    text = ex.ablation_csv(rows)
    assert text.splitlines()[0].endswith("param_count") and len(text.splitlines()) == 5
    with pytest.raises(ConfigError):
        ex.run_skip_ablation(data, data, tiny_cfg(), FAST, [])


def test_skip_ablation_parallel_matches_serial():
    data = synthetic.toy_dataset(6, 32, seed=1)
    args = (data[:4], data[4:], tiny_cfg(), FAST, ["ss2", "ss4"])
    a = ex.run_skip_ablation(*args, compute_emd=False)
    b = ex.run_skip_ablation(*args, compute_emd=False, workers=2)
    assert ex.ablation_csv(a) == ex.ablation_csv(b)


def test_data_fraction_rows():
    data = synthetic.toy_dataset(12, 32, seed=2)
    spec = ex.ExperimentSpec(kind="data_fraction", fractions=[0.25, 1.0], repeats=3)
    rows = ex.run_data_fraction_experiment(data[:10], data[10:], tiny_cfg(), FAST, spec, compute_emd=False)
    assert len(rows) == 2
    assert [r.n_train for r in rows] == [3, 10]
    for r in rows:
        assert len(r.runs_cd) == 3
        assert r.cd.q1 <= r.cd.median <= r.cd.q3
    assert len(ex.fraction_csv(rows).splitlines()) == 3
    assert len(ex.fraction_runs_csv(rows).splitlines()) == 7


def test_cloud_size_rows():
    datasets = {M: (synthetic.toy_dataset(4, M, seed=M), synthetic.toy_dataset(2, M, seed=M + 1))
                for M in (64, 32)}
    rows = ex.run_cloud_size_experiment(datasets, tiny_cfg(), FAST, compute_emd=False, timing_repeats=1)
    assert [r.M for r in rows] == [32, 64]
    assert all(r.inference_time_ms > 0 for r in rows)
    assert ex.cloud_size_csv(rows).splitlines()[0] == "M,inference_time_ms,cd,emd,emd_mode"


def test_random_latent_wrapper():
    m = mdl.build(tiny_cfg()).eval()
    X = np.random.default_rng(0).standard_normal((1, 3, 32)).astype(np.float32)
    w = ex.RandomLatentModel(m, 3)
    assert np.array_equal(w(X).data, mdl.forward_random_latent(m, X, 3).data)


def test_more_data_does_not_hurt():
    train_set = synthetic.toy_dataset(100, 256, seed=0)
    test_set = synthetic.toy_dataset(30, 256, seed=1)
    spec = ex.ExperimentSpec(kind="data_fraction", fractions=[0.1, 1.0], repeats=5)
    rows = ex.run_data_fraction_experiment(train_set, test_set, ex.toy_model_config(),
                                           TrainConfig(epochs=10, batch_size=4, learning_rate=5e-3),
                                           spec, compute_emd=False)
    assert rows[1].cd.mean <= rows[0].cd.mean
