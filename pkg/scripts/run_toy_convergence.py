"""Train the toy autoencoder on the bundled shapes and print the loss curve.

    python scripts/run_toy_convergence.py --out results/toy_loss.csv
"""
import argparse
import time
from pathlib import Path

from lilanet import experiments as ex
from lilanet import model as mdl
from lilanet import synthetic
from lilanet import training as tr


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/toy_loss.csv")
    p.add_argument("--epochs", type=int, default=ex.TOY_TRAIN["epochs"])
    p.add_argument("--lr", type=float, default=ex.TOY_TRAIN["learning_rate"])
    p.add_argument("--batch-size", type=int, default=ex.TOY_TRAIN["batch_size"])
    p.add_argument("--skip", default="ss4")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()

    data = synthetic.toy_dataset(100, 256, seed=a.seed)
    model = mdl.build(ex.toy_model_config(skip=a.skip, init_seed=a.seed))
    cfg = ex.toy_train_config(epochs=a.epochs, learning_rate=a.lr, batch_size=a.batch_size, seed=a.seed)
    t0 = time.perf_counter()
    res = tr.train(model, data, cfg, on_epoch=lambda e, l: print(f"epoch {e:3d}  CD {l:.5f}", flush=True)
                   if e % 10 == 0 or e == cfg.epochs - 1 else None)
    seconds = time.perf_counter() - t0
    held_out = tr.evaluate(model, synthetic.toy_dataset(30, 256, seed=a.seed + 1), compute_emd=False).report
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    Path(a.out).write_text("epoch,cd\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(res.history)))
    print(f"first {res.history[0]:.5f}  final {res.history[-1]:.5f}  "
          f"held-out {held_out.cd:.5f}  {seconds:.0f}s")


if __name__ == "__main__":
    main()
