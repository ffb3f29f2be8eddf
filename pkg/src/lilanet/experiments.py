"""Experiment harnesses: skip ablation, training-data fraction sweep, cloud-size sweep."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor
from .model import ConfigError, ModelConfig, SkipVariant, build, forward_random_latent, param_count
from .training import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

KINDS = ("skip_ablation", "data_fraction", "cloud_size")
# a small output init keeps early reconstructions inside the unit sphere, which makes
# the drift towards per-point reconstruction far less seed dependent
TOY_WIDTHS = dict(encoder_widths=[16, 32, 64], latent_dim=64, decoder_widths=[128, 64], output_init_gain=0.1)
# batch 2 keeps batch-norm statistics per pair of clouds; batch 1 makes them per cloud,
# which the running averages used at evaluation cannot match.
# the last 10% of epochs run at a tenth of the rate
TOY_TRAIN = dict(epochs=200, batch_size=2, learning_rate=5e-3, lr_schedule="step", lr_floor=0.1, lr_drop_at=0.9)


@dataclass
class ExperimentSpec:
    kind: str = "skip_ablation"
    fractions: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 11)])
    repeats: int = 50
    cloud_sizes: list[int] = field(default_factory=lambda: [2048, 8192, 20000])
    variants: list[SkipVariant] = field(default_factory=lambda: [SkipVariant.SS1, SkipVariant.SS2,
                                                                 SkipVariant.SS3, SkipVariant.SS4])

    def __post_init__(self):
        self.variants = [SkipVariant(v) for v in self.variants]
        self.fractions = [float(f) for f in self.fractions]
        self.cloud_sizes = [int(m) for m in self.cloud_sizes]

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError("kind", f"expected one of {KINDS}")
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions", "must be non-empty and inside (0, 1]")
        if self.repeats < 1:
            raise ConfigError("repeats", "must be >= 1")
        if not self.variants:
            raise ConfigError("variants", "must be non-empty")
        if not self.cloud_sizes or any(m < 1 for m in self.cloud_sizes):
            raise ConfigError("cloud_sizes", "must be positive")

    @classmethod
    def desk(cls, kind: str) -> "ExperimentSpec":
        """Small defaults that finish on a laptop CPU."""
        return cls(kind=kind, fractions=[0.2, 0.4, 0.6, 0.8, 1.0], repeats=5,
                   cloud_sizes=[256, 1024, 4096])


def toy_model_config(**overrides) -> ModelConfig:
    cfg = ModelConfig(**{**TOY_WIDTHS, "points": 256})
    return replace(cfg, **overrides)


def toy_train_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TOY_TRAIN, **overrides})


class RandomLatentModel:
    """Evaluation wrapper: forward with the latent replaced by seeded noise."""

    def __init__(self, model, seed: int):
        self.model = model
        self.seed = seed
        self.training = False

    @property
    def dtype(self):
        return self.model.dtype

    def eval(self):
        self.model.eval()
        return self

    def __call__(self, X) -> Tensor:
        return forward_random_latent(self.model, X, self.seed)


def _run_jobs(fn: Callable, jobs: Sequence, workers: int = 1) -> list:
    # results are returned in job order whatever the completion order
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------- skip ablation

@dataclass
class AblationRow:
    variant: str
    cd_true: float
    emd_true: float
    cd_random: float
    emd_random: float
    param_count: int

    @property
    def degradation(self) -> float:
        return self.cd_random / self.cd_true


def _ablation_job(job) -> AblationRow:
    variant, model_cfg, train_cfg, train_set, test_set, emd_mode, compute_emd = job
    cfg = replace(model_cfg, skip=variant)
    model = build(cfg, train_cfg.dtype)
    train(model, train_set, train_cfg)
    true = evaluate(model, test_set, emd_mode=emd_mode, compute_emd=compute_emd, timing_repeats=1).report
    rand = evaluate(RandomLatentModel(model, train_cfg.seed), test_set, emd_mode=emd_mode,
                    compute_emd=compute_emd, timing_repeats=1).report
    return AblationRow(cfg.skip.value, true.cd, true.emd, rand.cd, rand.emd, param_count(cfg))


def run_skip_ablation(train_set, test_set, model_cfg: ModelConfig, train_cfg: TrainConfig,
                      variants: Sequence[SkipVariant | str], emd_mode: str = "auto",
                      compute_emd: bool = True, workers: int = 1) -> list[AblationRow]:
    """One model per variant, identical seeds; evaluated with the true and a random latent."""
    if not variants:
        raise ConfigError("variants", "must be non-empty")
    jobs = [(SkipVariant(v), model_cfg, train_cfg, train_set, test_set, emd_mode, compute_emd) for v in variants]
    return _run_jobs(_ablation_job, jobs, workers)


# ---------------------------------------------------------------- data fraction

@dataclass
class Distribution:
    mean: float
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float]

    @classmethod
    def of(cls, values) -> "Distribution":
        """Box-plot summary with 1.5 IQR whiskers; the mean includes outliers."""
        v = np.sort(np.asarray(values, dtype=np.float64))
        if not np.all(np.isfinite(v)):
            nan = float("nan")
            return cls(nan, nan, nan, nan, nan, nan, [])
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        iqr = q3 - q1
        lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
        inside = v[(v >= lo) & (v <= hi)]
        return cls(float(v.mean()), float(med), float(q1), float(q3),
                   float(inside.min()), float(inside.max()),
                   [float(x) for x in v[(v < lo) | (v > hi)]])


@dataclass
class FractionRow:
    fraction: float
    n_train: int
    cd: Distribution
    emd: Distribution
    runs_cd: list[float]
    runs_emd: list[float]


def _fraction_job(job):
    fraction, repeat, model_cfg, train_cfg, train_set, test_set, emd_mode, compute_emd = job
    n = max(1, int(np.ceil(fraction * len(train_set))))
    pick = np.random.default_rng([train_cfg.seed, repeat]).permutation(len(train_set))[:n]
    subset = [train_set[i] for i in np.sort(pick)]
    cfg = replace(model_cfg, init_seed=model_cfg.init_seed + repeat)
    model = build(cfg, train_cfg.dtype)
    train(model, subset, replace(train_cfg, seed=train_cfg.seed + repeat))
    rep = evaluate(model, test_set, emd_mode=emd_mode, compute_emd=compute_emd, timing_repeats=1).report
    return fraction, repeat, n, rep.cd, rep.emd


def run_data_fraction_experiment(train_set, test_set, model_cfg: ModelConfig, train_cfg: TrainConfig,
                                 spec: ExperimentSpec, emd_mode: str = "auto", compute_emd: bool = True,
                                 workers: int = 1) -> list[FractionRow]:
    """For each fraction, ``spec.repeats`` independent trainings on a random subset of the
    training set, all evaluated on the same held-out set."""
    spec.validate()
    jobs = [(f, r, model_cfg, train_cfg, train_set, test_set, emd_mode, compute_emd)
            for f in spec.fractions for r in range(spec.repeats)]
    results = {(f, r): (n, cd, e) for f, r, n, cd, e in _run_jobs(_fraction_job, jobs, workers)}
    rows = []
    for f in spec.fractions:
        runs = [results[(f, r)] for r in range(spec.repeats)]
        cds = [x[1] for x in runs]
        emds = [x[2] for x in runs]
        rows.append(FractionRow(f, runs[0][0], Distribution.of(cds),
                                Distribution.of(emds),
                                cds, emds))
    return rows


# ---------------------------------------------------------------- cloud size

@dataclass
class CloudSizeRow:
    M: int
    inference_time_ms: float
    cd: float
    emd: float
    emd_mode: str


def _size_job(job) -> CloudSizeRow:
    M, model_cfg, train_cfg, train_set, test_set, emd_mode, compute_emd, timing_repeats = job
    cfg = replace(model_cfg, points=M)
    model = build(cfg, train_cfg.dtype)
    train(model, train_set, train_cfg)
    rep = evaluate(model, test_set, emd_mode=emd_mode, compute_emd=compute_emd,
                   timing_repeats=timing_repeats).report
    return CloudSizeRow(M, rep.wall_time * 1e3, rep.cd, rep.emd, rep.emd_mode)


def run_cloud_size_experiment(datasets: dict[int, tuple[list, list]], model_cfg: ModelConfig,
                              train_cfg: TrainConfig, emd_mode: str = "auto", compute_emd: bool = True,
                              timing_repeats: int = 5, workers: int = 1) -> list[CloudSizeRow]:
    """``datasets`` maps M to (train clouds, test clouds) preprocessed at that size.

    Timing runs are sensitive to contention, so keep ``workers`` at 1 when the
    inference-time column matters.
    """
    if not datasets:
        raise ConfigError("cloud_sizes", "must be non-empty")
    jobs = [(M, model_cfg, train_cfg, tr, te, emd_mode, compute_emd, timing_repeats)
            for M, (tr, te) in sorted(datasets.items())]
    return _run_jobs(_size_job, jobs, workers)


# ---------------------------------------------------------------- CSV output

def _fmt(x) -> str:
    return repr(float(x))


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "cd_true_latent", "emd_true_latent", "cd_random_latent", "emd_random_latent",
                "param_count"])
    for r in rows:
        w.writerow([r.variant, _fmt(r.cd_true), _fmt(r.emd_true), _fmt(r.cd_random), _fmt(r.emd_random),
                    r.param_count])
    return buf.getvalue()


def fraction_csv(rows: Sequence[FractionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    stats = ("mean", "median", "q1", "q3", "whisker_low", "whisker_high", "outliers")
    w.writerow(["fraction", "n_train"] + [f"{m}_{s}" for m in ("cd", "emd") for s in stats])
    for r in rows:
        cells = [_fmt(r.fraction), r.n_train]
        for d in (r.cd, r.emd):
            cells += [_fmt(d.mean), _fmt(d.median), _fmt(d.q1), _fmt(d.q3), _fmt(d.whisker_low),
                      _fmt(d.whisker_high), ";".join(_fmt(o) for o in d.outliers)]
        w.writerow(cells)
    return buf.getvalue()


def fraction_runs_csv(rows: Sequence[FractionRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fraction", "repeat", "cd", "emd"])
    for r in rows:
        for i, (c, e) in enumerate(zip(r.runs_cd, r.runs_emd)):
            w.writerow([_fmt(r.fraction), i, _fmt(c), _fmt(e)])
    return buf.getvalue()


def cloud_size_csv(rows: Sequence[CloudSizeRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["M", "inference_time_ms", "cd", "emd", "emd_mode"])
    for r in rows:
        w.writerow([r.M, _fmt(r.inference_time_ms), _fmt(r.cd), _fmt(r.emd), r.emd_mode])
    return buf.getvalue()


def write_text(path, text: str) -> Path:
    p = Path(path)
    p.write_text(text)
    return p
