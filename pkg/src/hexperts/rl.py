"""Free-energy actor-critic over a hierarchy of experts.

The selector actor picks an expert per state; the chosen expert's
Gaussian actor emits the control. Rewards are augmented with the
per-step KL between the expert's action distribution and its running
action prior, discounted into free-energy returns that both critic
levels regress (Huber loss); actors follow advantage-weighted policy
gradients, with the selector additionally charged for its own divergence
from the expert prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import approx
from .approx import Adam, Net
from .distrib import PROB_FLOOR, ResourceParams, clamp_simplex, sample

__all__ = [
    "Trajectory",
    "RLBank",
    "make_rl_bank",
    "discounted_returns",
    "discounted_free_energy",
    "advantage",
    "collect_rollout",
    "rl_train_iteration",
    "evaluate_policy",
    "state_partition",
]

TINY = 1e-300
HUBER_DELTA = 1.0


@dataclass
class Trajectory:
    states: np.ndarray        # (T+1, S) including the final state
    experts: np.ndarray       # (T,) int
    actions: np.ndarray       # (T, A)
    rewards: np.ndarray       # (T,)
    log_probs: np.ndarray     # (T,) expert action log-densities
    prior_log_probs: np.ndarray   # (T,) action log-densities under the expert's prior
    sel_probs: np.ndarray     # (T, M) selector posteriors
    terminated: bool          # failure ending (True) vs truncation (False)

    def __len__(self) -> int:
        return self.rewards.shape[0]


@dataclass
class RLBank:
    sel_actor: Net
    sel_critic: Net
    actors: list
    critics: list
    prior_m: np.ndarray
    action_priors: list       # per expert [mean, log_std]
    rp: ResourceParams
    sel_actor_opt: Adam = field(default_factory=lambda: Adam(lr=1e-4))
    sel_critic_opt: Adam = field(default_factory=lambda: Adam(lr=1e-3))
    actor_opts: list = field(default_factory=list)
    critic_opts: list = field(default_factory=list)

    @property
    def num_experts(self) -> int:
        return len(self.actors)


def make_rl_bank(
    state_dim: int,
    action_dim: int,
    num_experts: int,
    rp: ResourceParams,
    rng: np.random.Generator,
    selector_hidden=(32, 32),
    expert_hidden=(),
    critic_hidden=(32, 32),
    actor_lr: float = 1e-4,
    critic_lr: float = 1e-3,
) -> RLBank:
    """Gaussian expert actors (linear by default) with unit-normal priors."""
    sel_actor = approx.make_net([state_dim, *selector_hidden, num_experts], rng, head="softmax")
    sel_critic = approx.make_net([state_dim, *critic_hidden, 1], rng, head="identity")
    actors = [
        approx.make_net([state_dim, *expert_hidden, action_dim], rng, head="gaussian")
        for _ in range(num_experts)
    ]
    critics = [
        approx.make_net([state_dim, *critic_hidden, 1], rng, head="identity")
        for _ in range(num_experts)
    ]
    return RLBank(
        sel_actor=sel_actor,
        sel_critic=sel_critic,
        actors=actors,
        critics=critics,
        prior_m=np.full(num_experts, 1.0 / num_experts),
        action_priors=[[np.zeros(action_dim), np.zeros(action_dim)] for _ in range(num_experts)],
        rp=rp,
        sel_actor_opt=Adam(lr=actor_lr),
        sel_critic_opt=Adam(lr=critic_lr),
        actor_opts=[Adam(lr=actor_lr) for _ in range(num_experts)],
        critic_opts=[Adam(lr=critic_lr) for _ in range(num_experts)],
    )


def discounted_returns(rewards, gamma: float, bootstrap: float = 0.0) -> np.ndarray:
    """Backward recursion R_t = r_t + gamma R_{t+1}, seeded by ``bootstrap``."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.empty_like(rewards)
    acc = float(bootstrap)
    for t in range(rewards.shape[0] - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def _step_free_energies(traj: Trajectory, rp: ResourceParams) -> np.ndarray:
    return traj.rewards - (traj.log_probs - traj.prior_log_probs) / rp.beta2


def discounted_free_energy(traj: Trajectory, bank: RLBank):
    """(F_t, F_bar_t): KL-penalized discounted returns for both levels.

    Both use the same realized-tuple penalty estimate; they differ in the
    critic that supplies the bootstrap when the episode was truncated
    rather than terminated.
    """
    rp = bank.rp
    f = _step_free_energies(traj, rp)
    if traj.terminated:
        boot_expert = boot_sel = 0.0
    else:
        last = traj.states[-1]
        m_last = int(traj.experts[-1])
        boot_expert = float(approx.forward(bank.critics[m_last], last)[0])
        boot_sel = float(approx.forward(bank.sel_critic, last)[0])
    return (
        discounted_returns(f, rp.gamma, bootstrap=boot_expert),
        discounted_returns(f, rp.gamma, bootstrap=boot_sel),
    )


def advantage(traj: Trajectory, bank: RLBank, level: str = "expert") -> np.ndarray:
    """One-step TD advantage of the free-energy reward against a critic.

    ``level`` picks the critic stack: per-expert critics evaluated at the
    steps their expert acted, or the selector critic everywhere. The
    bootstrap is zeroed past termination but kept at truncation.
    """
    if level not in ("expert", "selector"):
        raise ValueError(f"unknown level {level!r}")
    rp = bank.rp
    f = _step_free_energies(traj, rp)
    t_len = len(traj)
    values = np.empty(t_len + 1)
    if level == "selector":
        values[:] = np.asarray(approx.forward(bank.sel_critic, traj.states)).ravel()
    else:
        all_vals = np.column_stack(
            [np.asarray(approx.forward(c, traj.states)).ravel() for c in bank.critics]
        )
        experts_ext = np.append(traj.experts, traj.experts[-1])
        values[:] = all_vals[np.arange(t_len + 1), experts_ext]
    next_values = values[1:].copy()
    if traj.terminated:
        next_values[-1] = 0.0
    return f + rp.gamma * next_values - values[:-1]


def collect_rollout(env, bank: RLBank, rng: np.random.Generator, max_steps: int | None = None) -> Trajectory:
    """One episode: sample an expert per state, an action from its actor."""
    state = env.reset(rng).as_array()
    limit = max_steps if max_steps is not None else env.max_steps
    states = [state]
    experts, actions, rewards, log_probs, prior_log_probs, sel_rows = [], [], [], [], [], []
    for _ in range(limit):
        sel_p = approx.forward(bank.sel_actor, state)
        m = sample(sel_p, rng)
        params = approx.forward(bank.actors[m], state)
        action = approx.gaussian_sample(params, rng)
        lp = approx.gaussian_log_prob(params, action)
        plp = approx.gaussian_log_prob(bank.action_priors[m], action)
        next_state, reward, done = env.step(float(action[0]) if action.size == 1 else action)
        state = next_state.as_array()
        states.append(state)
        experts.append(m)
        actions.append(action)
        rewards.append(reward)
        log_probs.append(lp)
        prior_log_probs.append(plp)
        sel_rows.append(sel_p)
        if done:
            break
    return Trajectory(
        states=np.asarray(states),
        experts=np.asarray(experts, dtype=int),
        actions=np.asarray(actions),
        rewards=np.asarray(rewards, dtype=float),
        log_probs=np.asarray(log_probs, dtype=float),
        prior_log_probs=np.asarray(prior_log_probs, dtype=float),
        sel_probs=np.asarray(sel_rows),
        terminated=bool(getattr(env, "terminated", True)),
    )


def _huber_grad(residual: np.ndarray) -> np.ndarray:
    return np.clip(residual, -HUBER_DELTA, HUBER_DELTA)


def rl_train_iteration(bank: RLBank, env, batch_size: int, rng: np.random.Generator) -> dict:
    """Collect a batch of rollouts and update every component once."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rp = bank.rp
    trajs = [collect_rollout(env, bank, rng) for _ in range(batch_size)]

    all_states, all_next, all_experts = [], [], []
    all_adv_e, all_adv_s, all_f, all_fbar = [], [], [], []
    all_actions, all_sel_rows = [], []
    for traj in trajs:
        f_ret, fbar_ret = discounted_free_energy(traj, bank)
        all_f.append(f_ret)
        all_fbar.append(fbar_ret)
        all_adv_e.append(advantage(traj, bank, "expert"))
        all_adv_s.append(advantage(traj, bank, "selector"))
        all_states.append(traj.states[:-1])
        all_next.append(traj.states[1:])
        all_experts.append(traj.experts)
        all_actions.append(traj.actions)
        all_sel_rows.append(traj.sel_probs)
    states = np.concatenate(all_states)
    experts = np.concatenate(all_experts)
    actions = np.concatenate(all_actions)
    sel_rows = np.concatenate(all_sel_rows)
    f_targets = np.concatenate(all_f)
    fbar_targets = np.concatenate(all_fbar)
    adv_e = np.concatenate(all_adv_e)
    adv_s = np.concatenate(all_adv_s)
    total = states.shape[0]

    # selector actor: score-function gradient with the rate term
    prior_m = bank.prior_m if bank.prior_m.min() >= PROB_FLOOR else clamp_simplex(bank.prior_m)
    rows = np.arange(total)
    picked = np.maximum(sel_rows[rows, experts], TINY)
    weight = adv_s - (np.log(picked) - np.log(prior_m[experts])) / rp.beta1
    sel_cache = approx._forward_full(bank.sel_actor, states)
    sel_p_now = approx._softmax(sel_cache[1][-1])
    grad_out = np.zeros_like(sel_p_now)
    grad_out[rows, experts] = weight / np.maximum(sel_p_now[rows, experts], TINY)
    grads = approx.backward(bank.sel_actor, states, grad_out, cache=sel_cache)
    approx.step(bank.sel_actor_opt, bank.sel_actor, [-g / total for g in grads])

    # selector critic: Huber regression on the free-energy return
    v = np.asarray(approx.forward(bank.sel_critic, states)).ravel()
    grads = approx.backward(bank.sel_critic, states, _huber_grad(v - fbar_targets)[:, None])
    approx.step(bank.sel_critic_opt, bank.sel_critic, [g / total for g in grads])

    critic_losses = [float(np.mean(np.abs(v - fbar_targets)))]
    for m in range(bank.num_experts):
        idx = np.where(experts == m)[0]
        if idx.size == 0:
            continue
        xm = states[idx]
        mean, log_std = approx.forward(bank.actors[m], xm)
        mean = np.atleast_2d(mean)
        log_std = np.atleast_2d(log_std)
        d_mean, d_log_std = approx.gaussian_log_prob_grad((mean, log_std), np.atleast_2d(actions[idx]))
        g_out = np.concatenate([d_mean, d_log_std], axis=1) * adv_e[idx][:, None]
        grads = approx.backward(bank.actors[m], xm, g_out)
        approx.step(bank.actor_opts[m], bank.actors[m], [-g / idx.size for g in grads])

        vm = np.asarray(approx.forward(bank.critics[m], xm)).ravel()
        grads = approx.backward(bank.critics[m], xm, _huber_grad(vm - f_targets[idx])[:, None])
        approx.step(bank.critic_opts[m], bank.critics[m], [g / idx.size for g in grads])
        critic_losses.append(float(np.mean(np.abs(vm - f_targets[idx]))))

    # running priors (sequential over visited steps)
    lam1, lam2 = rp.lambda1, rp.lambda2
    for traj in trajs:
        mean_all, log_std_all = {}, {}
        for m in np.unique(traj.experts):
            mm, ls = approx.forward(bank.actors[m], traj.states[:-1])
            mean_all[int(m)], log_std_all[int(m)] = np.atleast_2d(mm), np.atleast_2d(ls)
        for t in range(len(traj)):
            m = int(traj.experts[t])
            bank.prior_m = lam2 * bank.prior_m + (1.0 - lam2) * traj.sel_probs[t]
            pm, pls = bank.action_priors[m]
            new_mean = lam1 * pm + (1.0 - lam1) * mean_all[m][t]
            new_var = lam1 * np.exp(2 * pls) + (1.0 - lam1) * np.exp(2 * log_std_all[m][t])
            bank.action_priors[m] = [new_mean, 0.5 * np.log(new_var)]

    marg = np.maximum(sel_rows.mean(axis=0), PROB_FLOOR)
    i_xm = float(
        np.mean(np.sum(sel_rows * (np.log(np.maximum(sel_rows, TINY)) - np.log(marg)[None, :]), axis=1))
    )
    return {
        "mean_reward": float(np.mean([traj.rewards.sum() for traj in trajs])),
        "mean_length": float(np.mean([len(traj) for traj in trajs])),
        "rate_xm": i_xm,
        "expert_kl": float(np.mean(np.concatenate([t.log_probs - t.prior_log_probs for t in trajs]))),
        "prior_m": bank.prior_m.copy(),
        "critic_loss": float(np.mean(critic_losses)),
    }


def evaluate_policy(bank: RLBank, env, rng: np.random.Generator, episodes: int = 20) -> dict:
    """Greedy rollouts: most probable expert, mean action."""
    lengths, rewards = [], []
    visited, assigned, sel_rows = [], [], []
    for _ in range(episodes):
        state = env.reset(rng).as_array()
        total = 0.0
        for t in range(env.max_steps):
            sel_p = approx.forward(bank.sel_actor, state)
            m = int(np.argmax(sel_p))
            mean, _ = approx.forward(bank.actors[m], state)
            visited.append(state)
            assigned.append(m)
            sel_rows.append(sel_p)
            next_state, reward, done = env.step(float(mean[0]) if mean.size == 1 else mean)
            total += reward
            state = next_state.as_array()
            if done:
                break
        lengths.append(t + 1)
        rewards.append(total)
    return {
        "mean_reward": float(np.mean(rewards)),
        "mean_length": float(np.mean(lengths)),
        "states": np.asarray(visited),
        "experts": np.asarray(assigned, dtype=int),
        "sel_probs": np.asarray(sel_rows),
    }


def state_partition(eval_result: dict) -> list:
    """Rows (state dims..., argmax expert, selector probs...) for CSV dumps."""
    rows = []
    for state, m, probs in zip(
        eval_result["states"], eval_result["experts"], eval_result["sel_probs"]
    ):
        rows.append(list(state) + [int(m)] + list(probs))
    return rows
