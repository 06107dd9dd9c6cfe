"""Central finite differences against the reverse pass."""

import numpy as np

from loop_pe import autodiff as ad

STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7


def numeric_grad(f, x, step=STEP):
    """Central differences of scalar ``f`` at array ``x`` (entry by entry)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f(x)
        flat[i] = old - step
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def mismatch(analytic, numeric):
    """Entries failing both the absolute and the relative tolerance."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    bad = (err > ABS_TOL) & (err > REL_TOL * scale)
    return int(bad.sum()), float(err.max()) if err.size else 0.0


def check_op(build, *arrays):
    """Compare backward of ``sum(w * build(*tensors))`` with finite differences.

    A fixed random weighting ``w`` makes every output entry matter.
    """
    rng = np.random.default_rng(len(arrays))
    out_shape = build(*[ad.Tensor(a) for a in arrays]).shape
    w = rng.normal(size=out_shape)

    def scalar(*vals):
        return float(np.sum(w * build(*[ad.Tensor(v) for v in vals]).data))

    params = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(build(*params), ad.Tensor(w)))
    grads = ad.backward(tape, loss, wrt=params)
    worst = 0
    for k, a in enumerate(arrays):
        def f(x, k=k):
            vals = list(arrays)
            vals[k] = x
            return scalar(*vals)
        bad, _ = mismatch(grads[params[k]], numeric_grad(f, a))
        worst = max(worst, bad)
    return worst
