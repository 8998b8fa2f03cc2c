"""Synthetic data generators and the cart-pole environment.

All generators are pure functions of an explicit seed (Philox streams via
:mod:`hexperts.seeding`), so datasets and environment traces are
reproducible byte-for-byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .seeding import rng_from

__all__ = [
    "LabeledDataset",
    "SineTask",
    "CartPoleState",
    "CartPole",
    "make_classification",
    "sample_mixture",
    "sample_sine_task",
    "sine_dataset",
    "dataset_to_csv",
    "trace_to_csv",
]

CLASSIFICATION_NAMES = ("moons", "circles", "blobs")


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray   # (N, D)
    labels: np.ndarray   # (N,) int class ids or float targets
    name: str

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if np.issubdtype(self.labels.dtype, np.integer) else 0

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class SineTask:
    a: float   # amplitude in [0.1, 5]
    b: float   # phase in [0, 2*pi]

    def __call__(self, x):
        return self.a * np.sin(np.asarray(x) + self.b)


def _standardize(x: np.ndarray) -> np.ndarray:
    return (x - x.mean(axis=0)) / np.maximum(x.std(axis=0), 1e-12)


def make_classification(name: str, n: int, noise: float, seed: int) -> LabeledDataset:
    """Two-dimensional toy classification sets, standardized.

    moons: two interleaved half circles. circles: two concentric circles
    with radius ratio 0.5. blobs: three isotropic Gaussian clusters.
    """
    if name not in CLASSIFICATION_NAMES:
        raise ValueError(f"unknown dataset {name!r}, expected one of {CLASSIFICATION_NAMES}")
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    rng = rng_from(np.random.SeedSequence((int(seed), 0x7461736B)))
    n0 = n // 2
    n1 = n - n0
    if name == "moons":
        t0 = rng.random(n0) * math.pi
        t1 = rng.random(n1) * math.pi
        upper = np.column_stack([np.cos(t0), np.sin(t0)])
        lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
        x = np.vstack([upper, lower])
        y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    elif name == "circles":
        t0 = rng.random(n0) * 2.0 * math.pi
        t1 = rng.random(n1) * 2.0 * math.pi
        outer = np.column_stack([np.cos(t0), np.sin(t0)])
        inner = 0.5 * np.column_stack([np.cos(t1), np.sin(t1)])
        x = np.vstack([outer, inner])
        y = np.concatenate([np.zeros(n0, dtype=int), np.ones(n1, dtype=int)])
    else:
        centers = rng.uniform(-5.0, 5.0, size=(3, 2))
        y = np.arange(n, dtype=int) % 3
        x = centers[y] + rng.standard_normal((n, 2))
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape)
    return LabeledDataset(inputs=_standardize(x), labels=y, name=name)


def sample_mixture(means, cov_scale: float, n: int, seed: int) -> np.ndarray:
    """Equal-weight Gaussian mixture with isotropic covariance cov_scale * I."""
    means = np.asarray(means, dtype=float)
    if means.ndim != 2 or means.shape[0] < 1:
        raise ValueError("means must be a non-empty list of D-vectors")
    if cov_scale <= 0:
        raise ValueError(f"cov_scale must be positive, got {cov_scale}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = rng_from(np.random.SeedSequence((int(seed), 0x6D6978)))
    comp = rng.integers(0, means.shape[0], size=n)
    return means[comp] + math.sqrt(cov_scale) * rng.standard_normal((n, means.shape[1]))


def sample_sine_task(rng: np.random.Generator) -> SineTask:
    """Amplitude uniform in [0.1, 5], phase uniform in [0, 2*pi]."""
    return SineTask(a=float(rng.uniform(0.1, 5.0)), b=float(rng.uniform(0.0, 2.0 * math.pi)))


def sine_dataset(task: SineTask, k: int, x_range, rng: np.random.Generator):
    """Disjoint K-point train and validation draws from one sine task."""
    lo, hi = float(x_range[0]), float(x_range[1])
    if not hi > lo:
        raise ValueError(f"empty x_range {x_range!r}")
    if k < 1:
        raise ValueError(f"need k >= 1, got {k}")
    xs = rng.uniform(lo, hi, size=2 * k)
    ys = task(xs)
    return (xs[:k], ys[:k]), (xs[k:], ys[k:])


# --- cart-pole ---------------------------------------------------------

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
FORCE_SCALE = 10.0
TIMESTEP = 0.02
ANGLE_LIMIT = 12.0 * math.pi / 180.0
POSITION_LIMIT = 2.4


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])


def step_dynamics(state: CartPoleState, force_direction: float) -> CartPoleState:
    """One explicit-Euler step of the classic cart-pole equations.

    Force is 10 N times the control signal, which is clipped to [-1, 1].
    """
    arr = state.as_array()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite state {state}")
    force = FORCE_SCALE * float(np.clip(force_direction, -1.0, 1.0))
    total_mass = CART_MASS + POLE_MASS
    pole_ml = POLE_MASS * POLE_HALF_LENGTH
    cos_t = math.cos(state.theta)
    sin_t = math.sin(state.theta)
    temp = (force + pole_ml * state.theta_dot**2 * sin_t) / total_mass
    theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
        POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t**2 / total_mass)
    )
    x_acc = temp - pole_ml * theta_acc * cos_t / total_mass
    return CartPoleState(
        x=state.x + TIMESTEP * state.x_dot,
        x_dot=state.x_dot + TIMESTEP * x_acc,
        theta=state.theta + TIMESTEP * state.theta_dot,
        theta_dot=state.theta_dot + TIMESTEP * theta_acc,
    )


class CartPole:
    """Balance task: +1 reward per step until the pole or cart leaves bounds.

    Episodes also end (truncated, not failed) after ``max_steps`` steps;
    ``terminated`` distinguishes the two endings for bootstrapping.
    """

    def __init__(self, max_steps: int = 500):
        self.max_steps = max_steps
        self.state: CartPoleState | None = None
        self.steps = 0
        self.terminated = False

    def reset(self, rng: np.random.Generator) -> CartPoleState:
        vals = rng.uniform(-0.05, 0.05, size=4)
        self.state = CartPoleState(*vals)
        self.steps = 0
        self.terminated = False
        return self.state

    def step(self, force_direction: float):
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state = step_dynamics(self.state, force_direction)
        self.steps += 1
        self.terminated = (
            abs(self.state.theta) > ANGLE_LIMIT or abs(self.state.x) > POSITION_LIMIT
        )
        done = self.terminated or self.steps >= self.max_steps
        return self.state, 1.0, done


# --- CSV export --------------------------------------------------------

def dataset_to_csv(ds: LabeledDataset, path) -> None:
    d = ds.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{i + 1}" for i in range(d)] + ["label"])
        for row, label in zip(ds.inputs, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [label])


def trace_to_csv(trace, path) -> None:
    """Trace rows: (t, state array, action, reward, done)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        dim = len(trace[0][1]) if trace else 0
        writer.writerow(["t"] + [f"s{i + 1}" for i in range(dim)] + ["action", "reward", "done"])
        for t, state, action, reward, done in trace:
            writer.writerow(
                [t] + [repr(float(v)) for v in state] + [repr(float(action)), repr(float(reward)), int(done)]
            )
