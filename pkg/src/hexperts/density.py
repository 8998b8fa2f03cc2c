"""Unsupervised density estimation with Normal-Wishart experts.

Each expert holds a Normal-Wishart posterior over the mean and precision
of a Gaussian data model; a selector routes points to experts by their
free energy (sampled-parameter log likelihood minus the scaled KL between
the expert's posterior and its frozen prior block). Expert learning
ascends the data likelihood of the reparameterized posterior draw, with
the scale matrix kept positive definite through a Cholesky factor whose
diagonal is parameterized in log space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import approx
from .approx import Adam, Net
from .distrib import PROB_FLOOR, ResourceParams, clamp_simplex, sample_rows

__all__ = [
    "NormalWishart",
    "ConstantTermUnsupported",
    "DensityBank",
    "nw_sample",
    "gaussian_loglik",
    "nw_kl",
    "make_density_bank",
    "density_free_energy",
    "density_train_step",
    "evaluate_density",
    "mixture_log_density",
    "bank_to_json",
]

TINY = 1e-300


class ConstantTermUnsupported(ValueError):
    """The lambda/nu-dependent constant is only available when both match."""


@dataclass(frozen=True)
class NormalWishart:
    """Parameter block (omega, lambda, W, nu) of one density expert."""

    omega: np.ndarray
    lam: float
    W: np.ndarray
    nu: float

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=float)
        W = np.asarray(self.W, dtype=float)
        d = omega.size
        if W.shape != (d, d):
            raise ValueError(f"scale matrix shape {W.shape} does not match dimension {d}")
        if not np.allclose(W, W.T):
            raise ValueError("scale matrix must be symmetric")
        np.linalg.cholesky(W)  # raises LinAlgError if not positive definite
        if self.lam <= 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.nu <= d - 1:
            raise ValueError(f"nu must exceed D - 1 = {d - 1}, got {self.nu}")
        object.__setattr__(self, "omega", omega.copy())
        object.__setattr__(self, "W", W.copy())

    @property
    def dim(self) -> int:
        return self.omega.size


def _bartlett_factor(dim: int, nu: float, rng: np.random.Generator, size: int | None):
    """Lower-triangular Bartlett factor(s) A with A A^T ~ Wishart(I, nu)."""
    n = 1 if size is None else size
    a = np.zeros((n, dim, dim))
    for i in range(dim):
        a[:, i, i] = np.sqrt(rng.chisquare(nu - i, size=n))
        for j in range(i):
            a[:, i, j] = rng.standard_normal(n)
    return a


def nw_sample(nw: NormalWishart, rng: np.random.Generator, size: int | None = None):
    """Draw (mu, Lambda): Lambda ~ Wishart(W, nu) via the Bartlett
    decomposition, then mu ~ N(omega, (lambda Lambda)^-1)."""
    d = nw.dim
    chol_w = np.linalg.cholesky(nw.W)
    a = _bartlett_factor(d, nw.nu, rng, size)
    la = chol_w[None, :, :] @ a
    lam_mat = la @ np.transpose(la, (0, 2, 1))
    # mu = omega + C^-T eps with C C^T = lambda * Lambda
    eps = rng.standard_normal((lam_mat.shape[0], d))
    mus = np.empty((lam_mat.shape[0], d))
    for i in range(lam_mat.shape[0]):
        c = math.sqrt(nw.lam) * la[i]
        mus[i] = nw.omega + solve_triangular(c, eps[i], lower=True, trans="T")
    if size is None:
        return mus[0], lam_mat[0]
    return mus, lam_mat


def gaussian_loglik(x, mu, precision) -> float:
    """Multivariate normal log density with an explicit precision matrix."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    precision = np.asarray(precision, dtype=float)
    d = x.size
    try:
        chol = np.linalg.cholesky(precision)
    except np.linalg.LinAlgError as exc:
        raise ValueError("precision matrix must be symmetric positive definite") from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    z = chol.T @ (x - mu)
    return -0.5 * (d * math.log(2.0 * math.pi) - log_det + float(z @ z))


def nw_kl(p: NormalWishart, q: NormalWishart, include_constant: bool = False) -> float:
    """KL(p || q) between Normal-Wishart blocks, in nats.

    Without the constant the value omits a term that depends only on
    (lambda, nu); since those are fixed hyper-parameters, relative
    comparisons and gradients in (omega, W) are unaffected. With
    ``include_constant`` the lambdas and nus must match, in which case the
    constant is zero and the result is the exact divergence.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    if include_constant and not (p.lam == q.lam and p.nu == q.nu):
        raise ConstantTermUnsupported(
            "constant term requires matching lambda and nu (where it vanishes)"
        )
    if (
        p.lam == q.lam
        and p.nu == q.nu
        and np.array_equal(p.omega, q.omega)
        and np.array_equal(p.W, q.W)
    ):
        return 0.0
    d = p.dim
    diff = q.omega - p.omega
    mean_term = 0.5 * q.lam * p.nu * float(diff @ p.W @ diff)
    ratio = np.linalg.solve(q.W, p.W)
    sign, log_det = np.linalg.slogdet(ratio)
    if sign <= 0:
        raise ValueError("scale matrices must be positive definite")
    return mean_term - 0.5 * q.nu * float(log_det) + 0.5 * p.nu * (float(np.trace(ratio)) - d)


# --- online learner ----------------------------------------------------


@dataclass
class _ExpertState:
    """Posterior parameters: omega, strict lower factor, log-diagonal."""

    omega: np.ndarray
    tril: np.ndarray       # strictly lower triangular part of the Cholesky factor
    log_diag: np.ndarray

    def chol(self) -> np.ndarray:
        return np.tril(self.tril, -1) + np.diag(np.exp(self.log_diag))

    def scale_matrix(self) -> np.ndarray:
        chol = self.chol()
        return chol @ chol.T

    def params(self) -> list:
        return [self.omega, self.tril, self.log_diag]


@dataclass
class DensityBank:
    selector: Net
    experts: list            # _ExpertState per expert
    priors: list             # frozen NormalWishart blocks
    prior_m: np.ndarray
    rp: ResourceParams
    lam: float
    nu: float
    sel_opt: Adam = field(default_factory=Adam)
    expert_opts: list = field(default_factory=list)
    baseline: float = 0.0
    baseline_decay: float = 0.99
    baseline_initialized: bool = False

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def posterior(self, m: int) -> NormalWishart:
        st = self.experts[m]
        return NormalWishart(omega=st.omega, lam=self.lam, W=st.scale_matrix(), nu=self.nu)


def _spread_centers(X: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Farthest-first traversal over the data from a random start point."""
    centers = [X[int(rng.integers(0, X.shape[0]))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(count - 1):
        centers.append(X[int(np.argmax(d2))])
        d2 = np.minimum(d2, np.sum((X - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def make_density_bank(
    X,
    num_experts: int,
    rp: ResourceParams,
    rng: np.random.Generator,
    lam: float = 25.0,
    prior_lam: float = 1.0,
    nu: float | None = None,
    selector_hidden=(10, 10),
    selector_lr: float = 1e-3,
    expert_lr: float = 1e-2,
) -> DensityBank:
    """Weakly informative prior blocks anchored on the data.

    Prior means sit on data points spread by distance-weighted sampling,
    W0 = I / nu, and the prior blocks carry a small mean-confidence
    ``prior_lam`` so the divergence penalty anchors each expert's scale
    matrix strongly but its mean only weakly. Posteriors start at their
    prior (omega, W), so every expert begins with zero divergence.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = X.shape[1]
    if nu is None:
        nu = d + 2.0
    selector = approx.make_net([d, *selector_hidden, num_experts], rng, head="softmax")
    centers = _spread_centers(X, num_experts, rng)
    experts, priors = [], []
    w0 = np.eye(d) / nu
    log_diag0 = 0.5 * np.log(np.diag(w0))
    for m in range(num_experts):
        omega0 = centers[m].copy()
        priors.append(NormalWishart(omega=omega0, lam=prior_lam, W=w0, nu=nu))
        experts.append(
            _ExpertState(omega=omega0.copy(), tril=np.zeros((d, d)), log_diag=log_diag0.copy())
        )
    return DensityBank(
        selector=selector,
        experts=experts,
        priors=priors,
        prior_m=np.full(num_experts, 1.0 / num_experts),
        rp=rp,
        lam=lam,
        nu=float(nu),
        sel_opt=Adam(lr=selector_lr),
        expert_opts=[Adam(lr=expert_lr) for _ in range(num_experts)],
    )


def _draw_reparameterized(bank: DensityBank, m: int, rng: np.random.Generator):
    """(mu, Lambda, chol factor, Bartlett square, eps) for one posterior draw."""
    st = bank.experts[m]
    d = st.omega.size
    chol = st.chol()
    a = _bartlett_factor(d, bank.nu, rng, None)[0]
    la = chol @ a
    lam_mat = la @ la.T
    eps = rng.standard_normal(d)
    c = math.sqrt(bank.lam) * la
    mu = st.omega + solve_triangular(c, eps, lower=True, trans="T")
    return mu, lam_mat, chol, a @ a.T, eps


def density_free_energy(bank: DensityBank, m: int, x, rng: np.random.Generator) -> float:
    """Single-draw likelihood of x under expert m minus its scaled prior KL."""
    if not 0 <= m < bank.num_experts:
        raise IndexError(f"expert index {m} out of range")
    mu, lam_mat, *_ = _draw_reparameterized(bank, m, rng)
    loglik = gaussian_loglik(x, mu, bank.lam * lam_mat)
    return loglik - nw_kl(bank.posterior(m), bank.priors[m]) / bank.rp.beta2


def density_train_step(bank: DensityBank, X, rng: np.random.Generator, with_metrics: bool = True) -> dict:
    """Route each point, update the selector and the sampled experts.

    The sampled expert ascends its free energy -- log likelihood of the
    reparameterized draw minus the scaled divergence from its prior block
    -- with respect to (omega, Cholesky factor); the factor's diagonal
    lives in log space so the scale matrix stays positive definite.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    batch = X.shape[0]
    rp = bank.rp

    sel_cache = approx._forward_full(bank.selector, X)
    sel_p = approx._softmax(sel_cache[1][-1])
    chosen = sample_rows(sel_p, rng)
    prior_m = bank.prior_m if bank.prior_m.min() >= PROB_FLOOR else clamp_simplex(bank.prior_m)

    klds = np.array([nw_kl(bank.posterior(m), bank.priors[m]) for m in range(bank.num_experts)])
    utilities = np.empty(batch)
    f_hat = np.empty(batch)
    for i in range(batch):
        m = int(chosen[i])
        st = bank.experts[m]
        mu, lam_mat, chol, bartlett_sq, _ = _draw_reparameterized(bank, m, rng)
        precision = bank.lam * lam_mat
        utilities[i] = gaussian_loglik(X[i], mu, precision)
        f_hat[i] = utilities[i] - klds[m] / rp.beta2

        # likelihood path: d/d omega through the mean reparameterization,
        # d/d chol through the Bartlett transform (the mean's dependence
        # on the scale draw is treated as constant)
        diff = X[i] - mu
        g_omega = precision @ diff
        g_lambda = 0.5 * np.linalg.inv(lam_mat) - 0.5 * bank.lam * np.outer(diff, diff)
        g_chol = 2.0 * g_lambda @ chol @ bartlett_sq
        # divergence-to-prior path: closed-form in (omega, W), W = chol chol^T
        prior = bank.priors[m]
        w_post = chol @ chol.T
        d_omega = st.omega - prior.omega
        kl_d_omega = prior.lam * bank.nu * (w_post @ d_omega)
        kl_d_w = (
            0.5 * prior.lam * bank.nu * np.outer(d_omega, d_omega)
            - 0.5 * bank.nu * np.linalg.inv(w_post)
            + 0.5 * bank.nu * np.linalg.inv(prior.W)
        )
        g_omega -= kl_d_omega / rp.beta2
        g_chol -= 2.0 * (kl_d_w @ chol) / rp.beta2
        g_tril = np.tril(g_chol, -1)
        g_log_diag = np.diag(g_chol) * np.exp(st.log_diag)
        approx.step_params(
            bank.expert_opts[m], st.params(), [-g_omega, -g_tril, -g_log_diag]
        )

    rows = np.arange(batch)
    log_ratio_m = np.log(np.maximum(sel_p[rows, chosen], TINY)) - np.log(prior_m[chosen])
    baseline = bank.baseline if bank.baseline_initialized else float(f_hat.mean())
    advantage = (f_hat - baseline) - log_ratio_m / rp.beta1

    sel_grad_out = np.zeros_like(sel_p)
    sel_grad_out[rows, chosen] = advantage / np.maximum(sel_p[rows, chosen], TINY)
    sel_grads = approx.backward(bank.selector, X, sel_grad_out, cache=sel_cache)
    approx.step(bank.sel_opt, bank.selector, [-g / batch for g in sel_grads])

    for i in range(batch):
        bank.prior_m = rp.lambda2 * bank.prior_m + (1.0 - rp.lambda2) * sel_p[i]
        bank.baseline = bank.baseline_decay * baseline + (1.0 - bank.baseline_decay) * float(f_hat[i])
        baseline = bank.baseline
    bank.baseline_initialized = True

    if not with_metrics:
        return {}
    return {
        "utility": float(utilities.mean()),
        "free_energy": float(f_hat.mean()),
        "expert_kl": float(klds[chosen].mean()),
        "rate_xm": float(
            np.mean(np.sum(sel_p * (np.log(np.maximum(sel_p, TINY)) - np.log(prior_m)[None, :]), axis=1))
        ),
    }


def mixture_log_density(bank: DensityBank, X) -> np.ndarray:
    """Plug-in mixture log density using E[Lambda] = nu W per expert."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    weights = clamp_simplex(bank.prior_m)
    comps = np.empty((X.shape[0], bank.num_experts))
    for m in range(bank.num_experts):
        st = bank.experts[m]
        precision = bank.lam * bank.nu * st.scale_matrix()
        chol = np.linalg.cholesky(precision)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        z = (X - st.omega) @ chol
        quad = np.sum(z * z, axis=1)
        comps[:, m] = -0.5 * (X.shape[1] * math.log(2 * math.pi) - log_det + quad)
    shifted = comps + np.log(weights)[None, :]
    top = shifted.max(axis=1)
    return top + np.log(np.sum(np.exp(shifted - top[:, None]), axis=1))


def evaluate_density(bank: DensityBank, X) -> dict:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    sel_p = np.atleast_2d(approx.forward(bank.selector, X))
    marg = np.maximum(sel_p.mean(axis=0), PROB_FLOOR)
    i_xm = float(
        np.mean(np.sum(sel_p * (np.log(np.maximum(sel_p, TINY)) - np.log(marg)[None, :]), axis=1))
    )
    klds = np.array([nw_kl(bank.posterior(m), bank.priors[m]) for m in range(bank.num_experts)])
    return {
        "mean_log_density": float(np.mean(mixture_log_density(bank, X))),
        "rate_xm": i_xm,
        "expert_kl": float(sel_p.mean(axis=0) @ klds),
        "prior_m": bank.prior_m.copy(),
        "usage": sel_p.mean(axis=0),
    }


def bank_to_json(bank: DensityBank) -> str:
    doc = {
        "lam": bank.lam,
        "nu": bank.nu,
        "prior_m": bank.prior_m.tolist(),
        "experts": [
            {
                "omega": bank.experts[m].omega.tolist(),
                "W": bank.experts[m].scale_matrix().tolist(),
                "lam": bank.lam,
                "nu": bank.nu,
            }
            for m in range(bank.num_experts)
        ],
    }
    return json.dumps(doc, indent=2)
