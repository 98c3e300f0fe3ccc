"""Forward solvers.

* :func:`solve_qp` -- primal-dual interior point (Mehrotra predictor-corrector)
  for ``min 1/2 x'Qx + c'x  s.t.  Ax = b, Gx <= h`` with ``Q = 2*gamma*I``,
  followed by an active-set polish that makes the primal exact to machine
  precision.
* :func:`solve_flow_exact` -- successive shortest paths on the residual
  network, augmenting while a negative-cost source-to-sink path exists.
* :func:`round_solution` -- nearest-binary rounding with an integrality report.
"""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .graph import ConstraintSet, check_feasible

logger = logging.getLogger(__name__)

OPTIMAL, MAX_ITER, INFEASIBLE = "optimal", "max_iter", "infeasible"


class SolverError(RuntimeError):
    pass


class RoundingError(ValueError):
    def __init__(self, msg, eq_rows=(), ineq_rows=()):
        super().__init__(msg)
        self.eq_rows = list(eq_rows)
        self.ineq_rows = list(ineq_rows)


@dataclass
class QpSolution:
    x: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    objective: float
    status: str
    iterations: int
    polished: bool = False
    residuals: dict = field(default_factory=dict)


@dataclass
class FlowSolution:
    x: np.ndarray
    objective: float
    n_paths: int = 0


def _cost_array(c) -> np.ndarray:
    return np.asarray(getattr(c, "c", c), dtype=float)


def _refined_solve(K: sp.spmatrix, rhs: np.ndarray, n_primal: int, delta: float = 1e-10,
                   iters: int = 20, rtol: float = 1e-14) -> np.ndarray:
    """Solve a (possibly singular but consistent) saddle-point system.

    Factorises ``K + diag(delta, ..., -delta, ...)`` and runs iterative
    refinement against the unregularised ``K``.
    """
    N = K.shape[0]
    reg = np.concatenate([np.full(n_primal, delta), np.full(N - n_primal, -delta)])
    lu = spla.splu((K + sp.diags(reg)).tocsc())
    z = lu.solve(rhs)
    scale = max(1.0, np.max(np.abs(rhs), initial=0.0))
    for _ in range(iters):
        r = rhs - K @ z
        if np.max(np.abs(r), initial=0.0) <= rtol * scale:
            break
        z = z + lu.solve(r)
    return z


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def kkt_residuals(x, lam, nu, gamma, c, constraints: ConstraintSet) -> dict:
    A, b, G, h = constraints.A, constraints.b, constraints.G, constraints.h
    slack = G @ x - h
    stat = 2.0 * gamma * x + c + G.T @ lam + A.T @ nu
    return {
        "primal_eq": float(np.max(np.abs(A @ x - b), initial=0.0)),
        "primal_ineq": float(np.max(slack, initial=-np.inf)),
        "dual_sign": float(-np.min(lam, initial=0.0)),
        "complementarity": float(np.max(np.abs(lam * slack), initial=0.0)),
        "stationarity": float(np.max(np.abs(stat), initial=0.0)),
    }


def solve_qp(gamma: float, c, constraints: ConstraintSet, tol: float = 1e-8, max_iter: int = 100,
             polish: bool = True) -> QpSolution:
    """Solve the Tikhonov-damped relaxation ``min gamma*|x|^2 + c'x`` over the flow polytope."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    c = _cost_array(c)
    A, b, G, h = constraints.A, constraints.b, constraints.G, constraints.h
    n, p, q = c.shape[0], A.shape[0], G.shape[0]
    if A.shape[1] != n or G.shape[1] != n:
        raise ValueError("cost and constraint dimensions disagree")
    qd = 2.0 * gamma
    if n == 0:
        return QpSolution(np.zeros(0), np.zeros(q), np.zeros(p), 0.0, OPTIMAL, 0, True)

    x = np.full(n, 0.5)
    s = h - G @ x
    s = np.where(s > 1e-2, s, 1.0)
    lam = np.ones(q)
    nu = np.zeros(p)
    At, Gt = A.T.tocsr(), G.T.tocsr()
    Zp = sp.csr_matrix((p, p))

    status = MAX_ITER
    it = 0
    best = None
    for it in range(1, max_iter + 1):
        r_d = qd * x + c + Gt @ lam + At @ nu
        r_p = A @ x - b
        r_g = G @ x + s - h
        mu = float(s @ lam) / q if q else 0.0
        res = max(np.max(np.abs(r_d)), np.max(np.abs(r_p), initial=0.0), np.max(np.abs(r_g), initial=0.0))
        comp = float(np.max(s * lam, initial=0.0))
        if best is None or res + comp < best[0]:
            best = (res + comp, x.copy(), lam.copy(), nu.copy())
        if res <= tol and comp <= tol:
            status = OPTIMAL
            break
        if max(np.max(np.abs(lam), initial=0.0), np.max(np.abs(nu), initial=0.0)) > 1e12:
            status = INFEASIBLE
            break

        W = lam / s
        H = sp.diags(np.full(n, qd)) + Gt @ sp.diags(W) @ G
        K = sp.bmat([[H, At], [A, Zp]], format="csc")
        try:
            lu = spla.splu(K)
        except RuntimeError:
            Kr = K + sp.diags(np.concatenate([np.zeros(n), np.full(p, -1e-12)]))
            try:
                lu = spla.splu(Kr.tocsc())
            except RuntimeError:
                status = INFEASIBLE
                break

        def newton(rc):
            rhs = np.concatenate([-r_d - Gt @ ((rc + lam * r_g) / s), -r_p])
            sol = lu.solve(rhs)
            dx, dnu = sol[:n], sol[n:]
            Gdx = G @ dx
            dlam = (rc + lam * r_g + lam * Gdx) / s
            ds = -r_g - Gdx
            return dx, ds, dlam, dnu

        dx_a, ds_a, dl_a, _ = newton(-s * lam)
        a_aff = min(1.0, _max_step(s, ds_a), _max_step(lam, dl_a))
        mu_aff = float((s + a_aff * ds_a) @ (lam + a_aff * dl_a)) / q
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        rc = -s * lam - ds_a * dl_a + sigma * mu
        dx, ds, dl, dnu = newton(rc)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(lam, dl)))
        if not np.isfinite(alpha) or alpha <= 0:
            alpha = 1.0
        x = x + alpha * dx
        s = s + alpha * ds
        lam = lam + alpha * dl
        nu = nu + alpha * dnu
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            status = INFEASIBLE
            break

    if status == MAX_ITER and best is not None:
        _, x, lam, nu = best
        s = np.maximum(h - G @ x, 0.0)

    sol = QpSolution(x=x, lam=lam, nu=nu, objective=float(0.5 * qd * x @ x + c @ x),
                     status=status, iterations=it)
    if polish and status == OPTIMAL:
        polished = _polish(sol, s, gamma, c, constraints, tol)
        if polished is not None:
            sol = polished
    sol.residuals = kkt_residuals(sol.x, sol.lam, sol.nu, gamma, c, constraints)
    return sol


def _polish(sol: QpSolution, s: np.ndarray, gamma: float, c: np.ndarray,
            constraints: ConstraintSet, tol: float) -> Optional[QpSolution]:
    """Re-solve on the active set identified by the interior point iterate.

    The primal comes from the equality-constrained QP on the active set; the
    duals are the minimum-norm correction of the interior-point duals that
    restores exact stationarity (duals need not be unique).
    """
    A, b, G, h = constraints.A, constraints.b, constraints.G, constraints.h
    n, p = A.shape[1], A.shape[0]
    active = np.flatnonzero(s < sol.lam)
    Ga = G[active]
    B = sp.vstack([A, Ga], format="csr")
    na = B.shape[0]
    Q = sp.diags(np.full(n, 2.0 * gamma))
    K = sp.bmat([[Q, B.T], [B, None]], format="csc")
    rhs = np.concatenate([-c, b, h[active]])
    try:
        z = _refined_solve(K, rhs, n)
    except RuntimeError:
        return None
    x = z[:n]

    lam = np.zeros_like(sol.lam)
    lam[active] = sol.lam[active]
    nu = sol.nu.copy()
    y0 = np.concatenate([nu, lam[active]])
    r = -(2.0 * gamma * x + c + B.T @ y0)
    # min |d| s.t. B' d = r
    M = sp.bmat([[sp.identity(na), B], [B.T, None]], format="csc")
    try:
        dz = _refined_solve(M, np.concatenate([np.zeros(na), r]), na)
    except RuntimeError:
        return None
    y = y0 + dz[:na]
    nu = y[:p]
    lam_a = y[p:]
    if lam_a.size and np.min(lam_a) < -tol:
        return None
    lam[active] = np.maximum(lam_a, 0.0)
    ineq = G @ x - h
    if ineq.size and np.max(ineq) > tol:
        return None
    res = kkt_residuals(x, lam, nu, gamma, c, constraints)
    if max(res.values()) > tol:
        return None
    obj = float(gamma * x @ x + c @ x)
    return QpSolution(x=x, lam=lam, nu=nu, objective=obj, status=OPTIMAL,
                      iterations=sol.iterations, polished=True)


# ---------------------------------------------------------------------------
# exact min-cost flow


class _Residual:
    __slots__ = ("head", "to", "cap", "cost", "nxt")

    def __init__(self, n_nodes):
        self.head = [-1] * n_nodes
        self.to, self.cap, self.cost, self.nxt = [], [], [], []

    def add(self, u, v, cost):
        for a, b, cst, cp in ((u, v, cost, 1), (v, u, -cost, 0)):
            self.to.append(b)
            self.cap.append(cp)
            self.cost.append(cst)
            self.nxt.append(self.head[a])
            self.head[a] = len(self.to) - 1


def solve_flow_exact(c, graph) -> FlowSolution:
    """Globally optimal integral flow with a free number of unit paths.

    Nodes: source, sink and a (u_i, v_i) pair per detection. Costs: S->u_i is
    ``c_en``, u_i->v_i ``c_det``, v_i->T ``c_ex`` and v_i->u_j ``c_tran``.
    Paths are augmented in order of increasing cost while the cost is negative,
    using Dijkstra on reduced costs (potentials initialised by a DAG pass).
    """
    c = _cost_array(c)
    m, n = graph.m, graph.n
    if c.shape[0] != n:
        raise ValueError(f"cost has length {c.shape[0]}, graph has {n} variables")
    if m == 0:
        return FlowSolution(np.zeros(n), 0.0, 0)
    S, T = 0, 1
    U = lambda i: 2 + 2 * i  # noqa: E731
    V = lambda i: 3 + 2 * i  # noqa: E731
    N = 2 + 2 * m
    R = _Residual(N)
    arc_of = np.empty(n, dtype=np.int64)
    for i in range(m):
        arc_of[m + i] = len(R.to)
        R.add(S, U(i), c[m + i])
        arc_of[i] = len(R.to)
        R.add(U(i), V(i), c[i])
        arc_of[2 * m + i] = len(R.to)
        R.add(V(i), T, c[2 * m + i])
    for e, (i, j) in enumerate(graph.transitions):
        arc_of[3 * m + e] = len(R.to)
        R.add(V(i), U(j), c[3 * m + e])

    # initial potentials: shortest distances in the DAG (transitions go i -> j with i < j)
    INF = float("inf")
    pi = [INF] * N
    pi[S] = 0.0
    incoming = [[] for _ in range(m)]
    for e, (i, j) in enumerate(graph.transitions):
        incoming[j].append((i, c[3 * m + e]))
    best_T = INF
    for i in range(m):
        du = c[m + i]
        for k, ct in incoming[i]:
            du = min(du, pi[V(k)] + ct)
        pi[U(i)] = du
        pi[V(i)] = du + c[i]
        best_T = min(best_T, pi[V(i)] + c[2 * m + i])
    pi[T] = best_T

    to, cap, cost, nxt, head = R.to, R.cap, R.cost, R.nxt, R.head
    n_paths = 0
    while True:
        dist = [INF] * N
        prev = [-1] * N
        dist[S] = 0.0
        heap = [(0.0, S)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            a = head[u]
            while a != -1:
                if cap[a] > 0:
                    v = to[a]
                    rc = cost[a] + pi[u] - pi[v]
                    if rc < 0.0:
                        rc = 0.0
                    nd = d + rc
                    if nd < dist[v]:
                        dist[v] = nd
                        prev[v] = a
                        heapq.heappush(heap, (nd, v))
                a = nxt[a]
        if dist[T] == INF:
            break
        path_cost = dist[T] + pi[T] - pi[S]
        if path_cost >= -1e-12:
            break
        v = T
        while v != S:
            a = prev[v]
            cap[a] -= 1
            cap[a ^ 1] += 1
            v = to[a ^ 1]
        n_paths += 1
        dT = dist[T]
        for v in range(N):
            pi[v] += min(dist[v], dT)

    x = np.array([1.0 - cap[arc_of[k]] for k in range(n)])
    return FlowSolution(x=x, objective=float(c @ x), n_paths=n_paths)


# ---------------------------------------------------------------------------


@dataclass
class RoundingReport:
    x: np.ndarray
    max_distance: float
    integral: bool
    feasible: Optional[bool] = None


def round_solution(x, tol: float = 1e-4, constraints: Optional[ConstraintSet] = None) -> RoundingReport:
    """Round to the nearest binary vector and report the distance to {0, 1}.

    With ``constraints`` given, an infeasible rounded vector raises
    :class:`RoundingError` carrying the violated rows.
    """
    x = np.asarray(x, dtype=float)
    xb = (x >= 0.5).astype(float)
    dist = float(np.max(np.abs(x - xb), initial=0.0))
    report = RoundingReport(x=xb, max_distance=dist, integral=dist <= tol)
    if constraints is not None:
        eq = np.flatnonzero(np.abs(constraints.A @ xb - constraints.b) > 0)
        ineq = np.flatnonzero(constraints.G @ xb - constraints.h > 0)
        if eq.size or ineq.size:
            raise RoundingError(
                f"rounded solution violates {eq.size} equality and {ineq.size} inequality rows",
                eq_rows=eq, ineq_rows=ineq)
        report.feasible = check_feasible(constraints, xb, tol=0.0)
    return report
