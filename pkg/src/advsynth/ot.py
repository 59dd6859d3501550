"""Entropic optimal transport between latent batches.

The distance used throughout training is <P, C> where P is the transport
plan produced by a fixed number of log-domain Sinkhorn iterations with
uniform marginals.  Gradients are taken through the full unrolled iteration
sequence (the default), or with the plan held fixed when the caller asks for
the envelope-style gradient instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _record

try:
    from . import _kernels as _K
except ImportError:  # numpy fallback loop below
    _K = None


@dataclass
class TransportPlan:
    """Final Sinkhorn coupling plus its target marginals (diagnostic only)."""

    coupling: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray

    def max_marginal_error(self) -> float:
        r = np.abs(self.coupling.sum(axis=1) - self.row_marginal).max()
        c = np.abs(self.coupling.sum(axis=0) - self.col_marginal).max()
        return float(max(r, c))


def cost_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances, shape (n, m).

    Computed from explicit differences so entries are exactly nonnegative
    and zero only for coinciding points.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cost_matrix: need (n,d) and (m,d), got {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out = Tensor(np.einsum("ijk,ijk->ij", diff, diff))
    need_a = a.requires_grad
    need_b = b.requires_grad

    def vjp(g):
        da = db = None
        if need_a or need_b:
            w = 2.0 * np.einsum("ij,ijk->ijk", g, diff)
            if need_a:
                da = w.sum(axis=1)
            if need_b:
                db = -w.sum(axis=0)
        return (da, db)

    return _record(out, (a, b), vjp)


def sinkhorn_distance(
    C: Tensor,
    reg: float,
    iters: int,
    grad_mode: str = "unroll",
) -> tuple[Tensor, TransportPlan]:
    """Entropic OT distance <P, C> under uniform marginals.

    Runs exactly `iters` dual updates in the log domain (no early exit,
    no cost normalization).  Returns the scalar distance on the tape and the
    final plan for diagnostics.

    grad_mode "unroll" differentiates through every iteration; "fixed_plan"
    treats the plan as a constant of C.
    """
    if C.data.ndim != 2:
        raise ShapeError(f"sinkhorn_distance: cost must be 2-d, got {C.shape}")
    if reg <= 0:
        raise ValueError(f"sinkhorn_distance: reg must be positive, got {reg}")
    if iters < 1:
        raise ValueError(f"sinkhorn_distance: iters must be >= 1, got {iters}")
    if grad_mode not in ("unroll", "fixed_plan"):
        raise ValueError(f"sinkhorn_distance: unknown grad_mode {grad_mode!r}")
    if np.isnan(C.data).any():
        raise ValueError("sinkhorn_distance: cost matrix contains NaN")

    n, m = C.shape
    dt = C.data.dtype
    inv_reg = dt.type(1.0 / reg)
    Chat = C.data * inv_reg
    log_u = dt.type(-np.log(n))
    log_v = dt.type(-np.log(m))

    need_grad = C.requires_grad
    store = _K is not None and need_grad and grad_mode == "unroll"
    Brow = np.empty((iters, n, m), dtype=dt) if store else None
    Bcol = np.empty((iters, n, m), dtype=dt) if store else None
    fs = gs = None
    M = np.empty((n, m), dtype=dt)
    lu = float(log_u)
    lv = float(log_v)
    if _K is not None:
        # scaled potentials f, g after each iteration.  The row/column softmax
        # weights of every log-sum-exp are kept when the unrolled backward will
        # run, which makes the reverse sweep exponential-free.  Only the exp
        # itself stays in numpy (simd), the bookkeeping around it is compiled.
        mxr = np.empty(n, dtype=dt)
        mxc = np.empty(m, dtype=dt)
        g = np.zeros(m, dtype=dt)
        for t in range(iters):
            np.exp(_K.sink_row_pre(Chat, g, M, mxr), out=M)
            f = _K.sink_row_post(M, mxr, lu, Brow[t] if store else M, store)
            np.exp(_K.sink_col_pre(Chat, f, M, mxc), out=M)
            g = _K.sink_col_post(M, mxc, lv, Bcol[t] if store else M, store)
        if store:
            # the last column softmax weights are the plan up to the 1/m marginal
            plan = Bcol[iters - 1] * dt.type(1.0 / m)
        else:
            plan = np.exp(f[:, None] + g[None, :] - Chat)
    else:
        # pure-numpy path; fs[t], gs[t] are the potentials after iteration t
        # and stay around for the unrolled backward below.
        fs = np.zeros((iters + 1, n), dtype=dt)
        gs = np.zeros((iters + 1, m), dtype=dt)
        for t in range(1, iters + 1):
            np.subtract(gs[t - 1][None, :], Chat, out=M)
            mx = M.max(axis=1)
            M -= mx[:, None]
            np.exp(M, out=M)
            s = M.sum(axis=1)
            np.log(s, out=s)
            s += mx
            np.subtract(log_u, s, out=fs[t])
            np.subtract(fs[t][:, None], Chat, out=M)
            mx = M.max(axis=0)
            M -= mx[None, :]
            np.exp(M, out=M)
            s = M.sum(axis=0)
            np.log(s, out=s)
            s += mx
            np.subtract(log_v, s, out=gs[t])
        plan = np.exp(fs[iters][:, None] + gs[iters][None, :] - Chat)

    dist = float((plan * C.data).sum())
    out = Tensor(np.asarray(dist, dtype=dt))
    C_data = C.data

    def vjp(gout):
        if not need_grad:
            return (None,)
        gd = np.asarray(gout, dtype=dt).reshape(())
        if grad_mode == "fixed_plan":
            return (gd * plan,)
        if store:
            return (_K.sinkhorn_backward(C_data, plan, Brow, Bcol, float(gd), float(inv_reg)),)
        # through D = sum(exp(f + g - Chat) * C) with S = f + g - Chat
        dS = gd * C_data * plan
        dC = gd * plan
        dChat = -dS
        df = dS.sum(axis=1)
        dg = dS.sum(axis=0)
        B = np.empty((n, m), dtype=dt)
        tmp = np.empty((n, m), dtype=dt)
        for t in range(iters, 0, -1):
            # g_t = log_v - lse_i(f_t - Chat): per-column softmax weights
            np.add(fs[t][:, None], (gs[t] - log_v)[None, :], out=B)
            B -= Chat
            np.exp(B, out=B)
            np.multiply(B, dg[None, :], out=tmp)
            dChat += tmp
            df -= B @ dg
            # f_t = log_u - lse_j(g_{t-1} - Chat): per-row softmax weights
            np.add((fs[t] - log_u)[:, None], gs[t - 1][None, :], out=B)
            B -= Chat
            np.exp(B, out=B)
            np.multiply(B, df[:, None], out=tmp)
            dChat += tmp
            dg = -(B.T @ df)
            # f_{t-1} is not read by iteration t, so its cotangent restarts
            df = np.zeros(n, dtype=dt)
        dC += dChat * inv_reg
        return (dC,)

    _record(out, (C,), vjp)
    marg_row = np.full(n, 1.0 / n, dtype=dt)
    marg_col = np.full(m, 1.0 / m, dtype=dt)
    return out, TransportPlan(plan, marg_row, marg_col)


def exact_ot_lp(C: np.ndarray, u: np.ndarray | None = None, u_adv: np.ndarray | None = None) -> float:
    """Exact OT cost via linear programming; the small-instance test oracle.

    Marginals default to uniform.  Limited to 8x8 instances; the
    transportation polytope is solved directly with scipy's HiGHS backend.
    """
    from scipy.optimize import linprog

    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if n > 8 or m > 8:
        raise ValueError(f"exact_ot_lp: oracle limited to 8x8 instances, got {C.shape}")
    u = np.full(n, 1.0 / n) if u is None else np.asarray(u, dtype=np.float64)
    u_adv = np.full(m, 1.0 / m) if u_adv is None else np.asarray(u_adv, dtype=np.float64)
    if abs(u.sum() - u_adv.sum()) > 1e-9:
        raise ValueError(f"exact_ot_lp: marginal sums differ: {u.sum()} vs {u_adv.sum()}")
    # equality constraints: row sums u, column sums u_adv (last column dropped as redundant)
    A = np.zeros((n + m - 1, n * m))
    b = np.zeros(n + m - 1)
    for i in range(n):
        A[i, i * m : (i + 1) * m] = 1.0
        b[i] = u[i]
    for j in range(m - 1):
        A[n + j, j::m] = 1.0
        b[n + j] = u_adv[j]
    res = linprog(C.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"exact_ot_lp: LP solve failed: {res.message}")
    return float(res.fun)
