"""Exact solver for the discrete two-stage information-constrained problem.

A tabular problem couples a state distribution p(x), a utility table
U(x, y) and a number of experts M. The solver alternates closed-form
coordinate updates -- Gibbs re-weighting of the action and selection
tables against their running priors, followed by exact marginal prior
recomputation -- until the tables reach a self-consistent fixed point.
Each block update maximizes the trade-off objective

    E[U] - (1/beta1) * I(X;M) - (1/beta2) * I(X;Y|M)

in its own coordinates, so the recorded per-sweep objective is
non-decreasing; this makes the solver its own verifier and the ground
truth against which the gradient-based learners are validated.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .distrib import PROB_FLOOR, ResourceParams, clamp_simplex, gibbs_posterior, simplex

__all__ = [
    "TabularProblem",
    "HierSolution",
    "NotConvergedWarning",
    "objective_value",
    "free_energy",
    "solve",
    "random_problem",
    "problem_to_json",
    "problem_from_json",
    "solution_to_json",
    "solution_from_json",
]


class NotConvergedWarning(RuntimeWarning):
    """Solver hit max_sweeps; the returned solution is flagged, not discarded."""


@dataclass(frozen=True)
class TabularProblem:
    px: np.ndarray         # (X,) state distribution
    utility: np.ndarray    # (X, Y) utility table
    num_experts: int

    def __post_init__(self):
        object.__setattr__(self, "px", simplex(self.px))
        u = np.asarray(self.utility, dtype=float)
        if u.ndim != 2 or u.shape[0] != self.px.size:
            raise ValueError(f"utility must be (|X|, |Y|) with |X|={self.px.size}, got {u.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("utility entries must be finite")
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        object.__setattr__(self, "utility", u.copy())

    @property
    def num_states(self) -> int:
        return self.px.size

    @property
    def num_actions(self) -> int:
        return self.utility.shape[1]


@dataclass
class HierSolution:
    sel: np.ndarray        # (X, M) expert-selection posteriors
    act: np.ndarray        # (X, M, Y) action posteriors
    prior_m: np.ndarray    # (M,) selection prior
    prior_y: np.ndarray    # (M, Y) per-expert action priors
    objective: float
    converged: bool = True
    last_delta: float = 0.0
    sweeps: int = 0
    objective_trace: np.ndarray = field(default_factory=lambda: np.empty(0))


def _kl_rows(post: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Row-wise KL(post || prior) where prior broadcasts; prior is clamped."""
    q = np.maximum(prior, PROB_FLOOR)
    q = q / q.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(post > 0, post * (np.log(np.maximum(post, PROB_FLOOR)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def _check_dims(prob: TabularProblem, sol: HierSolution) -> None:
    x, y, m = prob.num_states, prob.num_actions, prob.num_experts
    if sol.sel.shape != (x, m) or sol.act.shape != (x, m, y):
        raise ValueError(
            f"solution tables {sol.sel.shape}/{sol.act.shape} do not match problem ({x},{m})/({x},{m},{y})"
        )


def objective_value(prob: TabularProblem, sol: HierSolution, rp: ResourceParams) -> float:
    """E[U] - (1/beta1) I(X;M) - (1/beta2) I(X;Y|M) from the induced joint.

    Both mutual informations are computed against the exact marginals of
    the joint p(x) sel(m|x) act(y|x,m); the stored priors play no role.
    """
    _check_dims(prob, sol)
    px, u, sel, act = prob.px, prob.utility, sol.sel, sol.act
    weight = px[:, None] * sel                                   # (X, M) joint over (x, m)
    expected_u = float(np.einsum("xm,xmy,xy->", weight, act, u))

    marg_m = weight.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.where(sel > 0, np.log(np.maximum(sel, PROB_FLOOR)) - np.log(np.maximum(marg_m, PROB_FLOOR)), 0.0)
    i_xm = float(np.sum(weight * log_ratio))

    cond_y = np.einsum("xm,xmy->my", weight, act)                # joint over (m, y)
    pm = np.maximum(weight.sum(axis=0), PROB_FLOOR)
    py_given_m = cond_y / pm[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio_y = np.where(
            act > 0,
            np.log(np.maximum(act, PROB_FLOOR)) - np.log(np.maximum(py_given_m, PROB_FLOOR))[None, :, :],
            0.0,
        )
    i_xy_m = float(np.einsum("xm,xmy->", weight, act * log_ratio_y))
    return expected_u - i_xm / rp.beta1 - i_xy_m / rp.beta2


def free_energy(prob: TabularProblem, sol: HierSolution, rp: ResourceParams, x: int, m: int) -> float:
    """Expected utility of expert m in state x minus its scaled action KL."""
    _check_dims(prob, sol)
    if not (0 <= x < prob.num_states and 0 <= m < prob.num_experts):
        raise IndexError(f"state {x} / expert {m} out of range")
    row = sol.act[x, m]
    eu = float(row @ prob.utility[x])
    return eu - _kl_rows(row, sol.prior_y[m]) / rp.beta2


def _free_energy_table(prob: TabularProblem, rp: ResourceParams, act: np.ndarray, prior_y: np.ndarray) -> np.ndarray:
    eu = np.einsum("xmy,xy->xm", act, prob.utility)
    return eu - _kl_rows(act, prior_y[None, :, :]) / rp.beta2


def _variational_objective(
    prob: TabularProblem, rp: ResourceParams,
    sel: np.ndarray, act: np.ndarray, prior_m: np.ndarray, prior_y: np.ndarray,
) -> float:
    """Objective with the stored priors in place of exact marginals (upper-
    bounds the information terms, coincides with them at the fixed point)."""
    weight = prob.px[:, None] * sel
    expected_u = float(np.einsum("xm,xmy,xy->", weight, act, prob.utility))
    sel_cost = float(prob.px @ _kl_rows(sel, prior_m[None, :]))
    act_cost = float(np.sum(weight * _kl_rows(act, prior_y[None, :, :])))
    return expected_u - sel_cost / rp.beta1 - act_cost / rp.beta2


def solve(
    prob: TabularProblem,
    rp: ResourceParams,
    tol: float = 1e-8,
    max_sweeps: int = 10_000,
    rng: np.random.Generator | None = None,
) -> HierSolution:
    """Alternate the coupled Gibbs/marginal updates to a fixed point.

    Experts move first in each sweep so the selection stage always sees
    current free energies. Tables are initialized from symmetric
    Dirichlet(1) draws so that the expert symmetry is broken
    deterministically by the supplied generator.
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_sweeps < 1:
        raise ValueError(f"max_sweeps must be >= 1, got {max_sweeps}")
    if rng is None:
        rng = np.random.default_rng(0)
    nx, ny, nm = prob.num_states, prob.num_actions, prob.num_experts

    sel = rng.dirichlet(np.ones(nm), size=nx)
    act = rng.dirichlet(np.ones(ny), size=(nx, nm))
    prior_m = prob.px @ sel
    prior_y = _marginal_prior_y(prob.px, sel, act)

    trace = []
    delta = np.inf
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        prev = (sel, act, prior_m, prior_y)

        log_prior_y = _safe_log(prior_y)
        logits = log_prior_y[None, :, :] + rp.beta2 * prob.utility[:, None, :]
        act = _softmax_last(logits)

        prior_y = _marginal_prior_y(prob.px, sel, act)

        fe = _free_energy_table(prob, rp, act, prior_y)
        logits_m = _safe_log(prior_m)[None, :] + rp.beta1 * fe
        sel = _softmax_last(logits_m)

        prior_m = prob.px @ sel

        trace.append(_variational_objective(prob, rp, sel, act, prior_m, prior_y))
        delta = max(
            float(np.max(np.abs(sel - prev[0]))),
            float(np.max(np.abs(act - prev[1]))),
            float(np.max(np.abs(prior_m - prev[2]))),
            float(np.max(np.abs(prior_y - prev[3]))),
        )
        if delta < tol:
            break

    converged = delta < tol
    if not converged:
        warnings.warn(
            f"solver stopped after {max_sweeps} sweeps with residual {delta:.3e} >= tol {tol:.3e}",
            NotConvergedWarning,
        )
    return HierSolution(
        sel=sel,
        act=act,
        prior_m=prior_m,
        prior_y=prior_y,
        objective=trace[-1],
        converged=converged,
        last_delta=delta,
        sweeps=sweeps,
        objective_trace=np.asarray(trace),
    )


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _softmax_last(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _marginal_prior_y(px: np.ndarray, sel: np.ndarray, act: np.ndarray) -> np.ndarray:
    joint_m = px[:, None] * sel
    pm = np.maximum(joint_m.sum(axis=0), PROB_FLOOR)
    return np.einsum("xm,xmy->my", joint_m, act) / pm[:, None]


def random_problem(
    num_states: int, num_actions: int, num_experts: int, rng: np.random.Generator
) -> TabularProblem:
    """Uniform-[0,1] utilities with a random state distribution."""
    px = rng.dirichlet(np.ones(num_states))
    utility = rng.random((num_states, num_actions))
    return TabularProblem(px=px, utility=utility, num_experts=num_experts)


def problem_to_json(prob: TabularProblem) -> str:
    return json.dumps(
        {
            "px": prob.px.tolist(),
            "utility": prob.utility.tolist(),
            "num_experts": prob.num_experts,
        },
        indent=2,
    )


def problem_from_json(text: str) -> TabularProblem:
    doc = json.loads(text)
    return TabularProblem(
        px=np.asarray(doc["px"], dtype=float),
        utility=np.asarray(doc["utility"], dtype=float),
        num_experts=int(doc["num_experts"]),
    )


def solution_to_json(sol: HierSolution) -> str:
    return json.dumps(
        {
            "sel": sol.sel.tolist(),
            "act": sol.act.tolist(),
            "prior_m": sol.prior_m.tolist(),
            "prior_y": sol.prior_y.tolist(),
            "objective": sol.objective,
            "converged": sol.converged,
            "last_delta": sol.last_delta,
            "sweeps": sol.sweeps,
        },
        indent=2,
    )


def solution_from_json(text: str) -> HierSolution:
    doc = json.loads(text)
    return HierSolution(
        sel=np.asarray(doc["sel"], dtype=float),
        act=np.asarray(doc["act"], dtype=float),
        prior_m=np.asarray(doc["prior_m"], dtype=float),
        prior_y=np.asarray(doc["prior_y"], dtype=float),
        objective=float(doc["objective"]),
        converged=bool(doc.get("converged", True)),
        last_delta=float(doc.get("last_delta", 0.0)),
        sweeps=int(doc.get("sweeps", 0)),
    )
