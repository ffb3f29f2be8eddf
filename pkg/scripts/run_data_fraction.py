"""Held-out reconstruction error as a function of the training-set fraction.

Defaults are the desk-scale protocol (fractions 0.2..1.0, 5 repeats); pass
``--fractions 0.1 0.2 ... 1.0 --repeats 50`` for the full sweep.

    python scripts/run_data_fraction.py --out results --workers 2
"""
import argparse
import logging
from pathlib import Path

from lilanet import experiments as ex
from lilanet import synthetic


def main():
    desk = ex.ExperimentSpec.desk("data_fraction")
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results")
    p.add_argument("--fractions", type=float, nargs="+", default=desk.fractions)
    p.add_argument("--repeats", type=int, default=desk.repeats)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test", type=int, default=30)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-emd", action="store_true")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    spec = ex.ExperimentSpec(kind="data_fraction", fractions=a.fractions, repeats=a.repeats)
    train_set = synthetic.toy_dataset(a.n_train, a.points, seed=a.seed)
    test_set = synthetic.toy_dataset(a.n_test, a.points, seed=a.seed + 1)
    rows = ex.run_data_fraction_experiment(train_set, test_set,
                                           ex.toy_model_config(points=a.points, init_seed=a.seed),
                                           ex.toy_train_config(epochs=a.epochs, seed=a.seed), spec,
                                           compute_emd=not a.no_emd, workers=a.workers)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_text(out / "data_fraction.csv", ex.fraction_csv(rows))
    ex.write_text(out / "data_fraction_runs.csv", ex.fraction_runs_csv(rows))
    for r in rows:
        print(f"fraction {r.fraction:.1f} (n={r.n_train}): CD median {r.cd.median:.5f} "
              f"IQR [{r.cd.q1:.5f}, {r.cd.q3:.5f}]")


if __name__ == "__main__":
    main()
