"""Inference time and reconstruction error against the number of points per cloud.

    python scripts/run_cloud_size.py --sizes 256 1024 4096 --out results/cloud_size.csv
"""
import argparse
import logging
from pathlib import Path

from lilanet import experiments as ex
from lilanet import synthetic


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/cloud_size.csv")
    p.add_argument("--sizes", type=int, nargs="+", default=ex.ExperimentSpec.desk("cloud_size").cloud_sizes)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--n-train", type=int, default=100)
    p.add_argument("--n-test", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing-repeats", type=int, default=5)
    p.add_argument("--no-emd", action="store_true")
    a = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    datasets = {M: (synthetic.toy_dataset(a.n_train, M, seed=a.seed),
                    synthetic.toy_dataset(a.n_test, M, seed=a.seed + 1)) for M in a.sizes}
    rows = ex.run_cloud_size_experiment(datasets, ex.toy_model_config(init_seed=a.seed),
                                        ex.toy_train_config(epochs=a.epochs, seed=a.seed),
                                        compute_emd=not a.no_emd, timing_repeats=a.timing_repeats)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    text = ex.cloud_size_csv(rows)
    ex.write_text(a.out, text)
    print(text, end="")


if __name__ == "__main__":
    main()
