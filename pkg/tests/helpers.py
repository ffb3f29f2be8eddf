"""Finite-difference oracles shared by the unit and acceptance tests."""
import numpy as np

from lilanet import autodiff as ad
from lilanet import model as mdl
from lilanet.autodiff import Tensor
from lilanet.model import ModelConfig

TINY = dict(encoder_widths=[4, 8, 16], latent_dim=16, decoder_widths=[8, 4], points=8)


def grad_check(fn, arrays, seed=0, h=1e-5):
    """Analytic vs central-difference gradients of ``sum(w * fn(*arrays))``."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    w = rng.standard_normal(out.shape)
    grads = ad.backward(ad.weighted_sum(out, w))

    def f():
        with ad.no_grad():
            return float(ad.weighted_sum(fn(*[Tensor(a) for a in arrays]), w).data)

    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        num = ad.numerical_gradient(f, arr, h=h)
        worst = max(worst, ad.relative_error(grads.get(leaf, np.zeros_like(arr)), num))
    return worst


def away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def activation_pattern(out: ad.Tensor) -> bytes:
    """ReLU on/off masks and max-pool winners of every node feeding ``out``."""
    parts = []
    for node in ad.Tape.from_output(out).nodes:
        if node.op == "relu":
            parts.append((node.data > 0).tobytes())
        elif node.op == "max_pool_points":
            parts.append(node.saved["argmax"].tobytes())
    return b"".join(parts)


def tiny_network(variant, seed):
    """64-bit tiny network with randomized affine parameters, input and output weights."""
    rng = np.random.default_rng(seed)
    m = mdl.build(ModelConfig(**{**TINY, "skip": variant}, init_seed=seed), np.float64)
    for name, p in m.params.items():
        if name.endswith(("gamma", "beta", "bias")):
            p.data[:] = rng.uniform(0.5, 1.5, p.data.shape) * rng.choice([-1, 1], p.data.shape)
    X = rng.standard_normal((2, 3, 8))
    w = rng.standard_normal((2, 3, 8))
    return m, X, w


def network_gradcheck(variant, seed, h=1e-5):
    """Worst relative error over all parameters, plus (skipped, total) coordinate counts.

    Coordinates whose +-h probes change the ReLU or max-pool pattern straddle a
    kink, where central differences do not estimate the derivative; they are
    skipped and counted.
    """
    m, X, w = tiny_network(variant, seed)
    out = mdl.forward(m, X)
    grads = ad.backward(ad.weighted_sum(out, w))
    base = activation_pattern(out)

    def probe():
        o = mdl.forward(m, X)
        return float(ad.weighted_sum(o, w).data), activation_pattern(o)

    numeric, valid = {}, {}
    for name, p in m.params.items():
        arr = p.data
        num = np.zeros_like(arr)
        ok = np.ones(arr.shape, bool)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            fp, pp = probe()
            arr[i] = old - h
            fm, pm = probe()
            arr[i] = old
            num[i] = (fp - fm) / (2 * h)
            ok[i] = pp == base and pm == base
        numeric[name], valid[name] = num, ok
    scale = max(float(np.abs(n).max()) for n in numeric.values())
    worst, skipped, total = 0.0, 0, 0
    for name, p in m.params.items():
        ok = valid[name]
        skipped += int((~ok).sum())
        total += ok.size
        if ok.any():
            a = grads.get(p, np.zeros_like(p.data))
            worst = max(worst, ad.relative_error(a[ok], numeric[name][ok], scale=scale))
    return worst, skipped, total
