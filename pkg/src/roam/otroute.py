"""Entropic optimal-transport routing: log-domain Sinkhorn, graph-regularized
iterations, top-k dispatch, and exact small-instance oracles."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from roam.tokenizer import RegionGraph

_FEASIBILITY_TOL = 1e-12


@dataclass
class Marginals:
    r: np.ndarray  # (M,) region supply, positive, sums to 1
    q: np.ndarray  # (E,) expert capacity, positive, sums to 1

    def validate(self) -> None:
        for name, v in (("r", self.r), ("q", self.q)):
            v = np.asarray(v)
            if v.ndim != 1 or np.any(v <= 0):
                raise ValueError(f"{name} must be a positive vector")
            if abs(v.sum() - 1.0) > _FEASIBILITY_TOL:
                raise ValueError(f"{name} must sum to 1, got {v.sum()!r}")

    @classmethod
    def from_masses(cls, masses: np.ndarray, n_experts: int) -> "Marginals":
        masses = np.asarray(masses, dtype=np.float64)
        return cls(r=masses / masses.sum(), q=np.full(n_experts, 1.0 / n_experts))


@dataclass
class TransportPlan:
    plan: torch.Tensor  # (M, E) float64, strictly positive
    row_residuals: list[float]  # inf-norm row-marginal residual per iteration
    r: np.ndarray
    q: np.ndarray

    @property
    def row_residual(self) -> float:
        return self.row_residuals[-1] if self.row_residuals else float("nan")

    def numpy(self) -> np.ndarray:
        return self.plan.detach().numpy()

    def transport_cost(self, cost: torch.Tensor) -> float:
        return float((self.plan * cost).sum())


@dataclass
class DispatchMatrix:
    gamma: torch.Tensor  # (M, E), at most k nonzeros per row, row sums equal r
    k: int

    def numpy(self) -> np.ndarray:
        return self.gamma.detach().numpy()

    def support(self, expert: int) -> np.ndarray:
        return np.nonzero(self.numpy()[:, expert] > 0)[0]

    def dominant_expert(self) -> np.ndarray:
        return np.argmax(self.numpy(), axis=1)


def cost_matrix(z: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Cosine dissimilarity 1 - cos(z_m, mu_e), entries in [0, 2].

    Zero-norm rows get cosine 0 (cost 1) with a numerical warning, so dead
    units do not kill training.
    """
    zn = z.norm(dim=1)
    pn = prototypes.norm(dim=1)
    dead_z = zn == 0
    dead_p = pn == 0
    if bool(dead_z.any()) or bool(dead_p.any()):
        warnings.warn("zero-norm vector in cosine cost; treating cosine as 0")
    cos = (z @ prototypes.T) / (zn.clamp_min(1e-300).unsqueeze(1) * pn.clamp_min(1e-300))
    dead = dead_z.unsqueeze(1) | dead_p.unsqueeze(0)
    cos = torch.where(dead, torch.zeros_like(cos), cos)
    return 1.0 - cos.clamp(-1.0, 1.0)


def _smoothing_iterations(n_iters: int, n_smooth: int) -> set[int]:
    """Diffusion happens after the row-column pair at evenly spaced iterations."""
    return {max(1, (n_iters * j) // (n_smooth + 1)) for j in range(1, n_smooth + 1)}


def _diffuse_log_plan(log_plan: torch.Tensor, graph: RegionGraph, lambda_s: float) -> torch.Tensor:
    if graph.k == 0 or lambda_s == 0.0:
        return log_plan
    nbr = torch.from_numpy(graph.neighbors)
    w = torch.from_numpy(graph.weights)
    agg = (w.unsqueeze(2) * log_plan[nbr]).sum(dim=1)
    return (1.0 - lambda_s) * log_plan + lambda_s * agg


def _log_sinkhorn(
    cost: torch.Tensor,
    marginals: Marginals,
    eps: float,
    n_iters: int,
    graph: RegionGraph | None = None,
    lambda_s: float = 0.0,
    smooth_at: set[int] | None = None,
    converge_tol: float | None = None,
) -> TransportPlan:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if n_iters < 1:
        raise ValueError("need at least one iteration")
    if not bool(torch.isfinite(cost).all()):
        raise ValueError("cost matrix contains non-finite entries")
    marginals.validate()
    m, e = cost.shape
    if marginals.r.shape[0] != m or marginals.q.shape[0] != e:
        raise ValueError("marginal lengths do not match the cost matrix")
    if graph is not None and graph.n_nodes != m:
        raise ValueError("graph node count does not match the cost matrix")

    log_r = torch.log(torch.from_numpy(np.asarray(marginals.r, dtype=np.float64)))
    log_q = torch.log(torch.from_numpy(np.asarray(marginals.q, dtype=np.float64)))
    r_t = torch.from_numpy(np.asarray(marginals.r, dtype=np.float64))
    log_plan = -cost / eps
    smooth_at = smooth_at or set()
    residuals: list[float] = []

    for it in range(1, n_iters + 1):
        log_plan = log_plan + (log_r - torch.logsumexp(log_plan, dim=1)).unsqueeze(1)
        log_plan = log_plan + (log_q - torch.logsumexp(log_plan, dim=0)).unsqueeze(0)
        with torch.no_grad():
            row_res = (torch.logsumexp(log_plan, dim=1).exp() - r_t).abs().max()
        residuals.append(float(row_res))
        if graph is not None and it in smooth_at:
            log_plan = _diffuse_log_plan(log_plan, graph, lambda_s)

    # Evaluation-mode refinement: keep projecting (no diffusion) until the row
    # residual clears the tolerance, capped at 10x the base iteration count.
    if converge_tol is not None:
        while residuals[-1] > converge_tol and len(residuals) < 10 * n_iters:
            log_plan = log_plan + (log_r - torch.logsumexp(log_plan, dim=1)).unsqueeze(1)
            log_plan = log_plan + (log_q - torch.logsumexp(log_plan, dim=0)).unsqueeze(0)
            with torch.no_grad():
                row_res = (torch.logsumexp(log_plan, dim=1).exp() - r_t).abs().max()
            residuals.append(float(row_res))

    # Column projection last so the capacity marginal holds to machine precision
    # even when the final iteration was followed by a diffusion step.
    log_plan = log_plan + (log_q - torch.logsumexp(log_plan, dim=0)).unsqueeze(0)
    return TransportPlan(
        plan=log_plan.exp(), row_residuals=residuals, r=marginals.r, q=marginals.q
    )


def sinkhorn(
    cost: torch.Tensor,
    marginals: Marginals,
    eps: float,
    n_iters: int,
    converge_tol: float | None = None,
) -> TransportPlan:
    """Log-domain Sinkhorn with a fixed iteration unroll; column marginal exact.

    `converge_tol` enables evaluation-mode refinement past the fixed unroll
    (extra projection pairs until the row residual clears the tolerance, with
    a 10x iteration cap). Leave it None when the call sits on a gradient path.
    """
    return _log_sinkhorn(cost, marginals, eps, n_iters, converge_tol=converge_tol)


def graph_sinkhorn(
    cost: torch.Tensor,
    marginals: Marginals,
    eps: float,
    n_iters: int,
    graph: RegionGraph,
    lambda_s: float,
    n_smooth: int,
) -> TransportPlan:
    """Sinkhorn interleaved with log-plan diffusion over the region graph.

    The diffusion is a row-wise convex combination in log space at n_smooth
    evenly spaced iterations; later iterations restore marginal feasibility.
    lambda_s = 0 recovers plain Sinkhorn exactly.
    """
    if not (0.0 <= lambda_s <= 1.0):
        raise ValueError("lambda_s must lie in [0, 1]")
    if not (0 <= n_smooth <= n_iters):
        raise ValueError("n_smooth must lie in [0, n_iters]")
    smooth_at = _smoothing_iterations(n_iters, n_smooth) if lambda_s > 0 and n_smooth > 0 else set()
    return _log_sinkhorn(
        cost, marginals, eps, n_iters, graph=graph, lambda_s=lambda_s, smooth_at=smooth_at
    )


def softmax_routing_plan(cost: torch.Tensor, marginals: Marginals, eps: float) -> TransportPlan:
    """Routing ablation: per-row softmax(-C/eps) scaled by r_m, no capacity constraint."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    marginals.validate()
    r_t = torch.from_numpy(np.asarray(marginals.r, dtype=np.float64))
    plan = torch.softmax(-cost / eps, dim=1) * r_t.unsqueeze(1)
    return TransportPlan(plan=plan, row_residuals=[0.0], r=marginals.r, q=marginals.q)


def topk_dispatch(plan: TransportPlan | torch.Tensor, r: np.ndarray, k: int) -> DispatchMatrix:
    """Keep the k largest plan entries per row (ties to the lower expert index)
    and rescale so each row sums to r_m exactly."""
    pi = plan.plan if isinstance(plan, TransportPlan) else plan
    m, e = pi.shape
    if not (1 <= k <= e):
        raise ValueError("need 1 <= k <= E")
    order = torch.argsort(pi, dim=1, descending=True, stable=True)
    mask = torch.zeros_like(pi)
    mask.scatter_(1, order[:, :k], 1.0)
    kept = pi * mask
    r_t = torch.from_numpy(np.asarray(r, dtype=np.float64))
    gamma = kept * (r_t / kept.sum(dim=1)).unsqueeze(1)
    return DispatchMatrix(gamma=gamma, k=k)


# ---------------------------------------------------------------------------
# Exact oracles (test references, independent of the Sinkhorn path)


def round_to_feasible(plan: TransportPlan | torch.Tensor, marginals: Marginals) -> torch.Tensor:
    """Project a near-feasible plan onto the transport polytope exactly.

    Rows are scaled down to at most r, columns to at most q, and the leftover
    mass is spread as a rank-one correction. Cost increase is on the order of
    the marginal violation, and the result satisfies both marginals, so its
    transport cost is a valid upper bound on the unregularized optimum.
    """
    pi = plan.plan if isinstance(plan, TransportPlan) else plan
    pi = pi.detach().clone()
    r = torch.from_numpy(np.asarray(marginals.r, dtype=np.float64))
    q = torch.from_numpy(np.asarray(marginals.q, dtype=np.float64))
    pi *= torch.clamp(r / pi.sum(dim=1), max=1.0).unsqueeze(1)
    pi *= torch.clamp(q / pi.sum(dim=0), max=1.0).unsqueeze(0)
    err_r = r - pi.sum(dim=1)
    err_q = q - pi.sum(dim=0)
    total = err_r.sum()
    if total > 0:
        pi += torch.outer(err_r, err_q) / total
    return pi


def _is_uniform(v: np.ndarray) -> bool:
    return bool(np.allclose(v, 1.0 / v.shape[0], atol=1e-12))


def exact_ot_oracle(cost: np.ndarray, marginals: Marginals) -> tuple[float, np.ndarray]:
    """Exact unregularized OT optimum on small instances.

    Square instances with uniform marginals are solved by permutation
    enumeration; otherwise small rectangular instances go through an LP solver.
    """
    cost = np.asarray(cost, dtype=np.float64)
    marginals.validate()
    m, e = cost.shape
    if m == e and m <= 8 and _is_uniform(marginals.r) and _is_uniform(marginals.q):
        best_cost, best_perm = np.inf, None
        for perm in itertools.permutations(range(e)):
            c = sum(cost[i, perm[i]] for i in range(m)) / m
            if c < best_cost:
                best_cost, best_perm = c, perm
        plan = np.zeros((m, e))
        for i, j in enumerate(best_perm):
            plan[i, j] = 1.0 / m
        return float(best_cost), plan
    if m <= 8 and e <= 4:
        from scipy.optimize import linprog

        a_eq = np.zeros((m + e, m * e))
        for i in range(m):
            a_eq[i, i * e : (i + 1) * e] = 1.0
        for j in range(e):
            a_eq[m + j, j::e] = 1.0
        b_eq = np.concatenate([marginals.r, marginals.q])
        # One marginal constraint is redundant; drop it for a full-rank system.
        res = linprog(cost.ravel(), A_eq=a_eq[:-1], b_eq=b_eq[:-1], bounds=(0, None), method="highs")
        if not res.success:
            raise RuntimeError(f"LP oracle failed: {res.message}")
        return float(res.fun), res.x.reshape(m, e)
    raise ValueError(f"instance {m}x{e} too large for the exact oracle")
