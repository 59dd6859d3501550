"""Central finite-difference gradient checking used across the test suite.

All checks run in double precision with a random linear projection as the
loss, so the finite-difference truncation error comes only from the op
under test.
"""

import numpy as np

from advsynth.tensor import Tape, Tensor, mul, tsum


def projection_loss(out: Tensor, rng: np.random.Generator):
    r = Tensor(rng.standard_normal(out.shape) if out.shape else np.asarray(rng.standard_normal()))
    return tsum(mul(out, r)), r.data


def fd_gradcheck(fn, tensors, rng, h=1e-5, tol=1e-4, max_entries=10):
    """Asserts tape gradients of sum(fn(*tensors) * R) match central differences.

    Checks up to max_entries randomly chosen coordinates per differentiable
    input; returns the worst relative error seen.
    """
    with Tape() as tape:
        out = fn(*tensors)
        loss, r = projection_loss(out, rng)
        tape.backward(loss)

    def eval_loss():
        return float((fn(*tensors).data * r).sum())

    worst = 0.0
    for t in tensors:
        if not (isinstance(t, Tensor) and t.requires_grad):
            continue
        g = tape.grad(t)
        assert g is not None, "missing gradient for a requires_grad input"
        assert g.shape == t.data.shape
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        k = min(max_entries, flat.size)
        for idx in rng.choice(flat.size, size=k, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = eval_loss()
            flat[idx] = orig - h
            lm = eval_loss()
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(fd - gflat[idx]) / max(1.0, abs(fd))
            assert err < tol, f"gradient mismatch: fd={fd} ad={gflat[idx]} rel={err}"
            worst = max(worst, err)
    return worst
