"""Online selector-plus-experts learner for classification and regression.

Each training sample is routed to a single expert drawn from the selector
posterior; the selector follows a score-function gradient on the sampled
expert's free energy (utility minus scaled KL to the expert's running
output prior, minus the selector's own scaled KL to the expert prior),
and only the sampled expert takes an analytic gradient step on its own
free-energy objective. Priors are exponential running means of the
posteriors.

Three utility kinds are supported: "xent" (softmax experts, integer
labels), "mse" (Gaussian-head experts, real targets) and "utility"
(softmax experts scored by a fixed state-action utility table, used to
validate the learner against the exact tabular solver).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import approx
from .approx import Adam, Net
from .distrib import PROB_FLOOR, ResourceParams, clamp_simplex, kl, sample_rows

__all__ = ["ExpertBank", "make_bank", "expert_free_energy", "train_step", "evaluate"]

TINY = 1e-300


@dataclass
class ExpertBank:
    selector: Net
    experts: list
    prior_m: np.ndarray
    rp: ResourceParams
    kind: str = "xent"                    # "xent" | "mse" | "utility"
    prior_y: np.ndarray | None = None     # (M, C) for categorical experts
    prior_gauss: list | None = None       # per expert [mean, log_std] arrays for "mse"
    utility_matrix: np.ndarray | None = None   # (X, Y) for "utility"
    sel_opt: Adam = field(default_factory=Adam)
    expert_opts: list = field(default_factory=list)
    baseline: float = 0.0
    baseline_decay: float = 0.99
    baseline_initialized: bool = False

    @property
    def num_experts(self) -> int:
        return len(self.experts)


def make_bank(
    input_dim: int,
    output_dim: int,
    num_experts: int,
    rp: ResourceParams,
    rng: np.random.Generator,
    kind: str = "xent",
    selector_hidden=(10, 10),
    expert_hidden=(),
    selector_lr: float = 3e-4,
    expert_lr: float = 3e-4,
    utility_matrix=None,
) -> ExpertBank:
    """Fresh bank with uniform priors.

    ``output_dim`` is the class count for "xent"/"utility" and the target
    dimension for "mse".
    """
    if kind not in ("xent", "mse", "utility"):
        raise ValueError(f"unknown utility kind {kind!r}")
    selector = approx.make_net([input_dim, *selector_hidden, num_experts], rng, head="softmax")
    head = "gaussian" if kind == "mse" else "softmax"
    experts = [
        approx.make_net([input_dim, *expert_hidden, output_dim], rng, head=head)
        for _ in range(num_experts)
    ]
    bank = ExpertBank(
        selector=selector,
        experts=experts,
        prior_m=np.full(num_experts, 1.0 / num_experts),
        rp=rp,
        kind=kind,
        sel_opt=Adam(lr=selector_lr),
        expert_opts=[Adam(lr=expert_lr) for _ in range(num_experts)],
    )
    if kind == "mse":
        bank.prior_gauss = [
            [np.zeros(output_dim), np.zeros(output_dim)] for _ in range(num_experts)
        ]
    else:
        bank.prior_y = np.full((num_experts, output_dim), 1.0 / output_dim)
    if kind == "utility":
        if utility_matrix is None:
            raise ValueError("utility kind requires a utility matrix")
        bank.utility_matrix = np.asarray(utility_matrix, dtype=float)
    return bank


def _categorical_free_energy(bank: ExpertBank, m: int, probs: np.ndarray, target) -> tuple:
    """(utility, expert KL, ascent gradient at the softmax output)."""
    prior = clamp_simplex(bank.prior_y[m])
    log_ratio = np.log(np.maximum(probs, TINY)) - np.log(prior)
    kl_q = float(np.sum(probs * log_ratio))
    if bank.kind == "xent":
        target = int(target)
        utility = float(np.log(max(probs[target], TINY)))
        grad = np.zeros_like(probs)
        grad[target] = 1.0 / max(probs[target], TINY)
    else:
        urow = bank.utility_matrix[int(target)]
        utility = float(probs @ urow)
        grad = urow.copy()
    grad = grad - (log_ratio + 1.0) / bank.rp.beta2
    return utility, kl_q, grad


def _gaussian_free_energy(bank: ExpertBank, m: int, head_out, target) -> tuple:
    mean, log_std = head_out
    target = np.atleast_1d(np.asarray(target, dtype=float))
    p_mean, p_log_std = bank.prior_gauss[m]
    err = mean - target
    utility = float(-np.sum(err * err))
    kl_q = approx.diag_gaussian_kl(mean, log_std, p_mean, p_log_std)
    d_mean_kl, d_log_std_kl = approx.diag_gaussian_kl_grad(mean, log_std, p_mean, p_log_std)
    grad = np.concatenate([-2.0 * err - d_mean_kl / bank.rp.beta2, -d_log_std_kl / bank.rp.beta2])
    return utility, kl_q, grad


def expert_free_energy(bank: ExpertBank, m: int, x, target) -> float:
    """Utility of expert m on one sample minus its scaled output KL."""
    if not 0 <= m < bank.num_experts:
        raise IndexError(f"expert index {m} out of range for {bank.num_experts} experts")
    out = approx.forward(bank.experts[m], x)
    if bank.kind == "mse":
        utility, kl_q, _ = _gaussian_free_energy(bank, m, out, target)
    else:
        utility, kl_q, _ = _categorical_free_energy(bank, m, out, target)
    return utility - kl_q / bank.rp.beta2


def train_step(bank: ExpertBank, X, y, rng: np.random.Generator, with_metrics: bool = True) -> dict:
    """One update on a batch; gradients use batch-start parameters.

    Returns step metrics (mean utility, the selector rate against the
    running prior, the mean expert KL) unless ``with_metrics`` is off.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(y)
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("batch inputs and targets must be non-empty and aligned")
    batch = X.shape[0]
    rp = bank.rp

    sel_cache = approx._forward_full(bank.selector, X)
    sel_p = approx._softmax(sel_cache[1][-1])
    chosen = sample_rows(sel_p, rng)

    prior_m = bank.prior_m if bank.prior_m.min() >= PROB_FLOOR else clamp_simplex(bank.prior_m)
    utilities = np.empty(batch)
    kls = np.empty(batch)
    f_hat = np.empty(batch)
    expert_grad_rows: list = [None] * batch
    expert_outs: list = [None] * batch
    expert_caches: dict = {}
    for m in ([chosen[0]] if batch == 1 else np.unique(chosen)):
        idx = np.arange(1) if batch == 1 else np.where(chosen == m)[0]
        cache = approx._forward_full(bank.experts[m], X[idx])
        expert_caches[int(m)] = (idx, cache)
        raw = cache[1][-1]
        for j, i in enumerate(idx):
            if bank.kind == "mse":
                k = raw.shape[1] // 2
                out = (raw[j, :k], np.clip(raw[j, k:], approx.LOG_STD_MIN, approx.LOG_STD_MAX))
                utilities[i], kls[i], expert_grad_rows[i] = _gaussian_free_energy(bank, m, out, y[i])
            else:
                out = approx._softmax(raw[j])
                utilities[i], kls[i], expert_grad_rows[i] = _categorical_free_energy(bank, m, out, y[i])
            expert_outs[i] = out
            f_hat[i] = utilities[i] - kls[i] / rp.beta2

    rows = np.arange(batch)
    log_ratio_m = np.log(np.maximum(sel_p[rows, chosen], TINY)) - np.log(prior_m[chosen])
    baseline = bank.baseline if bank.baseline_initialized else float(f_hat.mean())
    advantage = (f_hat - baseline) - log_ratio_m / rp.beta1

    # selector: score-function ascent, mean over the batch
    sel_grad_out = np.zeros_like(sel_p)
    sel_grad_out[rows, chosen] = advantage / np.maximum(sel_p[rows, chosen], TINY)
    sel_grads = approx.backward(bank.selector, X, sel_grad_out, cache=sel_cache)
    approx.step(bank.sel_opt, bank.selector, [-g / batch for g in sel_grads])

    # experts: analytic ascent on their own free energy, sampled ones only
    for m, (idx, cache) in expert_caches.items():
        grads = approx.backward(
            bank.experts[m], X[idx], np.stack([expert_grad_rows[i] for i in idx]), cache=cache
        )
        approx.step(bank.expert_opts[m], bank.experts[m], [-g / idx.size for g in grads])

    # running priors and baseline (sequential over the batch)
    for i in range(batch):
        m = int(chosen[i])
        bank.prior_m = rp.lambda2 * bank.prior_m + (1.0 - rp.lambda2) * sel_p[i]
        if bank.kind == "mse":
            mean, log_std = expert_outs[i]
            pm, pls = bank.prior_gauss[m]
            new_mean = rp.lambda1 * pm + (1.0 - rp.lambda1) * mean
            new_var = rp.lambda1 * np.exp(2 * pls) + (1.0 - rp.lambda1) * np.exp(2 * log_std)
            bank.prior_gauss[m] = [new_mean, 0.5 * np.log(new_var)]
        else:
            bank.prior_y[m] = rp.lambda1 * bank.prior_y[m] + (1.0 - rp.lambda1) * expert_outs[i]
        bank.baseline = bank.baseline_decay * baseline + (1.0 - bank.baseline_decay) * float(f_hat[i])
        baseline = bank.baseline
    bank.baseline_initialized = True

    if not with_metrics:
        return {}
    rate_xm = float(
        np.mean(
            np.sum(
                sel_p * (np.log(np.maximum(sel_p, TINY)) - np.log(prior_m)[None, :]), axis=1
            )
        )
    )
    return {
        "utility": float(utilities.mean()),
        "rate_xm": rate_xm,
        "expert_kl": float(kls.mean()),
        "free_energy": float(f_hat.mean()),
    }


def evaluate(bank: ExpertBank, X, y) -> dict:
    """Mixture accuracy/MSE plus information estimates over a dataset.

    I(X;M) is the exact mutual information of the induced (x, m) joint
    (selector posteriors against their empirical marginal), so it always
    lies in [0, ln M]; the expert-stage term follows the running priors.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(y)
    if X.shape[0] == 0:
        raise ValueError("dataset must be non-empty")
    sel_p = np.atleast_2d(approx.forward(bank.selector, X))
    marg = np.maximum(sel_p.mean(axis=0), PROB_FLOOR)
    i_xm = float(
        np.mean(np.sum(sel_p * (np.log(np.maximum(sel_p, TINY)) - np.log(marg)[None, :]), axis=1))
    )

    i_xy_m = 0.0
    metrics: dict = {}
    if bank.kind == "mse":
        preds = np.zeros((X.shape[0], bank.experts[0].out_dim))
        for m, expert in enumerate(bank.experts):
            mean, log_std = approx.forward(expert, X)
            preds += sel_p[:, m : m + 1] * mean
            pm, pls = bank.prior_gauss[m]
            var_p = np.exp(2 * log_std)
            var_q = np.exp(2 * pls)
            kl_rows = np.sum(
                pls - log_std + (var_p + (mean - pm) ** 2) / (2 * var_q) - 0.5, axis=1
            )
            i_xy_m += float(np.mean(sel_p[:, m] * kl_rows))
        targets = np.atleast_2d(np.asarray(y, dtype=float).reshape(X.shape[0], -1))
        metrics["mse"] = float(np.mean(np.sum((preds - targets) ** 2, axis=1)))
    else:
        n_classes = bank.experts[0].out_dim
        mixture = np.zeros((X.shape[0], n_classes))
        for m, expert in enumerate(bank.experts):
            probs = np.atleast_2d(approx.forward(expert, X))
            mixture += sel_p[:, m : m + 1] * probs
            prior = clamp_simplex(bank.prior_y[m])
            kl_rows = np.sum(
                probs * (np.log(np.maximum(probs, TINY)) - np.log(prior)[None, :]), axis=1
            )
            i_xy_m += float(np.mean(sel_p[:, m] * kl_rows))
        if bank.kind == "xent":
            metrics["accuracy"] = float(np.mean(np.argmax(mixture, axis=1) == y))
        else:
            urows = bank.utility_matrix[y.astype(int)]
            metrics["utility"] = float(np.mean(np.sum(mixture * urows, axis=1)))
    metrics.update(
        {
            "rate_xm": i_xm,
            "rate_xy_given_m": i_xy_m,
            "usage": sel_p.mean(axis=0),
        }
    )
    return metrics
