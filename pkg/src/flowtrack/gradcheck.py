"""Random flow instances and the finite-difference gradient suite."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .difflayer import DegenerateKKTError, LOSSES, backward_dc, finite_difference_dc
from .graph import Detection, build_constraints, build_graph
from .qp import OPTIMAL, solve_qp

REL_FLOOR = 1e-6


def random_detections(rng, m: int, n_frames: int) -> list:
    """``m`` boxes spread over ``n_frames`` frames (every frame gets at least one if m allows)."""
    frames = np.sort(np.concatenate([np.arange(min(m, n_frames)),
                                     rng.integers(0, n_frames, size=max(0, m - n_frames))]))
    return [Detection(int(f), float(rng.uniform(0, 200)), float(rng.uniform(0, 200)),
                      float(rng.uniform(20, 40)), float(rng.uniform(40, 80)), float(rng.uniform(0.3, 1.0)))
            for f in frames]


def random_instance(rng, m_max: int = 8, n_frames: int = 3, max_gap: int = 2):
    """Random graph with random costs: ``(graph, constraints, c)``.

    Detection costs are ``-score``, entry/exit 1, transition costs ``-log p`` with
    ``p`` uniform, so both used and unused edges occur.
    """
    m = int(rng.integers(1, m_max + 1))
    graph = build_graph(random_detections(rng, m, n_frames), max_gap=max_gap)
    p = rng.uniform(0.01, 0.99, size=graph.n_transitions)
    c = np.concatenate([-np.array([d.score for d in graph.detections]) * rng.uniform(1.0, 3.0),
                        np.ones(2 * m), -np.log(p)])
    return graph, build_constraints(graph), c


@dataclass
class GradcheckReport:
    n_instances: int
    max_rel_error: float
    per_instance: list = field(default_factory=list)
    excluded_components: int = 0
    degenerate_instances: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def lines(self) -> list:
        out = [f"instances {self.n_instances}",
               f"max relative error {self.max_rel_error:.3e} (tol {self.tol:.1e})",
               f"excluded components (activity flips) {self.excluded_components}",
               f"degenerate instances {self.degenerate_instances}",
               "PASS" if self.passed else "FAIL"]
        return out


def run_gradcheck(n_graphs: int = 50, m_max: int = 8, n_frames: int = 3, gamma: float = 0.1,
                  step: float = 1e-5, tol: float = 1e-4, loss: str = "L2", seed: int = 0) -> GradcheckReport:
    """Compare ``backward_dc`` with central differences on random instances.

    The relative error of an instance is ``max|a - f| / max(max|f|, REL_FLOOR)``
    over the components whose active set is stable under the perturbation. The
    floor keeps all-bound instances (true gradient zero, differences at round-off)
    from dividing noise by noise.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    rng = np.random.default_rng(seed)
    loss_fn = LOSSES[loss]
    errors, degenerate = [], []
    excluded = 0
    for k in range(n_graphs):
        graph, cons, c = random_instance(rng, m_max, n_frames)
        target = rng.uniform(0, 1, size=c.shape[0])
        sol = solve_qp(gamma, c, cons)
        try:
            if sol.status != OPTIMAL:
                raise DegenerateKKTError(f"status {sol.status}")
            analytic = backward_dc(sol, cons, gamma, loss_fn(sol.x, target)[1])
        except DegenerateKKTError:
            degenerate.append(k)
            continue
        fd, stable = finite_difference_dc(c, cons, gamma, lambda x: loss_fn(x, target)[0], step)
        excluded += int((~stable).sum())
        if not stable.any():
            errors.append(0.0)
            continue
        f = fd[stable]
        errors.append(float(np.max(np.abs(analytic[stable] - f)) / max(np.max(np.abs(f)), REL_FLOOR)))
    return GradcheckReport(n_instances=n_graphs, max_rel_error=max(errors) if errors else 0.0,
                           per_instance=errors, excluded_components=excluded,
                           degenerate_instances=degenerate, tol=tol)
