"""Backward pass through the QP optimum and the training losses.

The Jacobian of the solution with respect to the linear cost solves::

    [ Q            G'            A' ] [dx/dc]   [-I]
    [ diag(lam) G  diag(Gx - h)  0  ] [dl/dc] = [ 0]
    [ A            0             0  ] [dn/dc]   [ 0]

For a loss gradient ``g = dL/dx`` the adjoint solve ``K' d = (g, 0, 0)``
gives ``dL/dc = -d_x``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cost import PROB_EPS
from .qp import OPTIMAL, _refined_solve, solve_qp

WEAK_TOL = 1e-7
WEAK_REG = 1e-10


class DegenerateKKTError(RuntimeError):
    def __init__(self, msg, rows=()):
        super().__init__(msg)
        self.rows = list(rows)


def _activity(solution, constraints):
    slack = constraints.h - constraints.G @ solution.x
    lam = solution.lam
    weak = (np.abs(slack) < WEAK_TOL) & (np.abs(lam) < WEAK_TOL)
    active = (slack < lam) & ~weak
    return active, weak, slack


def active_set(solution, constraints) -> np.ndarray:
    """Boolean mask of strongly active inequality rows."""
    return _activity(solution, constraints)[0]


def kkt_matrix(solution, constraints, gamma: float, weak_reg: float = WEAK_REG) -> sp.csc_matrix:
    """Assemble the (non-symmetric) KKT block matrix at ``solution``.

    Rows flagged weakly active (slack and multiplier both near zero) get
    ``weak_reg`` added to their complementarity diagonal entry.
    """
    if solution.status != OPTIMAL:
        raise ValueError(f"KKT system requires an optimal solution, got status={solution.status!r}")
    A, G, h = constraints.A, constraints.G, constraints.h
    n = A.shape[1]
    x, lam = solution.x, solution.lam
    d = G @ x - h
    _, weak, _ = _activity(solution, constraints)
    d = np.where(weak, d - weak_reg, d)
    Q = sp.diags(np.full(n, 2.0 * gamma))
    return sp.bmat([
        [Q, G.T, A.T],
        [sp.diags(lam) @ G, sp.diags(d), None],
        [A, None, None],
    ], format="csc")


def backward_dc(solution, constraints, gamma: float, grad_x, method: str = "reduced") -> np.ndarray:
    """Vector-Jacobian product ``dL/dc`` from ``dL/dx`` at a QP optimum.

    ``method="full"`` factorises the transposed KKT matrix directly with a
    sparse LU. ``method="reduced"`` solves the same system after eliminating
    the inactive rows (whose multipliers vanish) and pinning the adjoint of
    strongly active rows; it tolerates non-unique equality multipliers, which
    the full factorisation cannot.
    """
    g = np.asarray(grad_x, dtype=float)
    n = constraints.n
    if g.shape != (n,):
        raise ValueError(f"grad_x has shape {g.shape}, expected ({n},)")
    if solution.status != OPTIMAL:
        raise ValueError(f"backward pass requires an optimal solution, got status={solution.status!r}")
    if not np.any(g):
        return np.zeros(n)
    if method == "full":
        return _backward_full(solution, constraints, gamma, g)
    if method != "reduced":
        raise ValueError(f"unknown method {method!r}")

    A, G = constraints.A, constraints.G
    active, _, _ = _activity(solution, constraints)
    Ga = G[np.flatnonzero(active)]
    B = sp.vstack([A, Ga], format="csr")
    Q = sp.diags(np.full(n, 2.0 * gamma))
    K = sp.bmat([[Q, B.T], [B, None]], format="csc")
    rhs = np.concatenate([g, np.zeros(B.shape[0])])
    try:
        z = _refined_solve(K, rhs, n)
    except RuntimeError as exc:
        raise DegenerateKKTError(f"reduced KKT factorisation failed: {exc}") from exc
    u = z[:n]
    if not np.all(np.isfinite(u)):
        raise DegenerateKKTError("non-finite adjoint")
    return -u


def _backward_full(solution, constraints, gamma, g):
    K = kkt_matrix(solution, constraints, gamma)
    n = constraints.n
    rhs = np.zeros(K.shape[0])
    rhs[:n] = g
    try:
        lu = spla.splu(K.T.tocsc())
    except RuntimeError as exc:
        active, weak, _ = _activity(solution, constraints)
        Ga = abs(constraints.G[np.flatnonzero(active)])
        pinned = np.asarray(Ga.sum(axis=0)).ravel() > 0
        A = abs(constraints.A)
        # equality rows touching only pinned variables have non-unique multipliers
        eq_rows = np.flatnonzero(A @ (~pinned).astype(float) == 0)
        raise DegenerateKKTError(
            f"singular transposed KKT matrix ({exc}); weakly active rows {np.flatnonzero(weak).tolist()}, "
            f"equality rows without free variables {eq_rows.tolist()}",
            rows=np.flatnonzero(weak).tolist()) from exc
    return -lu.solve(rhs)[:n]


# ---------------------------------------------------------------------------
# losses


def loss_l2(x_hat, x_gt):
    x_gt = getattr(x_gt, "x_gt", x_gt)
    r = np.asarray(x_hat, dtype=float) - np.asarray(x_gt, dtype=float)
    return float(r @ r), 2.0 * r


def loss_l1(x_hat, x_gt):
    x_gt = getattr(x_gt, "x_gt", x_gt)
    r = np.asarray(x_hat, dtype=float) - np.asarray(x_gt, dtype=float)
    return float(np.abs(r).sum()), np.sign(r)


def loss_bce_edges(p, y, eps: float = PROB_EPS):
    """Mean binary cross-entropy over edges and its gradient w.r.t. ``p``."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    if p.size == 0:
        return 0.0, np.zeros(0)
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p > eps) & (p < 1.0 - eps)
    grad = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / p.size
    return float(loss), grad


LOSSES = {"L2": loss_l2, "L1": loss_l1}


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_dc(c, constraints, gamma: float, loss_fn, step: float = 1e-5, indices=None):
    """Central differences of ``loss_fn(x_hat(c))`` with activity bookkeeping.

    Returns ``(grad, stable)`` where ``stable[k]`` is False if the active set
    at ``c +- step*e_k`` differs from the one at ``c``.
    """
    c = np.asarray(getattr(c, "c", c), dtype=float)
    base = solve_qp(gamma, c, constraints)
    base_active = active_set(base, constraints)
    idx = range(c.shape[0]) if indices is None else indices
    grad = np.zeros(c.shape[0])
    stable = np.ones(c.shape[0], dtype=bool)
    for k in idx:
        vals = []
        for sgn in (1.0, -1.0):
            cp = c.copy()
            cp[k] += sgn * step
            sol = solve_qp(gamma, cp, constraints)
            if sol.status != OPTIMAL or not np.array_equal(active_set(sol, constraints), base_active):
                stable[k] = False
            vals.append(loss_fn(sol.x))
        grad[k] = (vals[0] - vals[1]) / (2.0 * step)
    return grad, stable
