"""Small dense networks with hand-written gradients.

Everything the learners need fits in plain numpy: linear maps with up to
a few hidden layers (tanh or rectifier), three output heads (softmax over
classes/experts, diagonal Gaussian, raw identity), reverse-mode gradients
computed analytically, and an adaptive-moment optimizer that also works
on arbitrary parameter lists. Forward and backward accept a single input
vector or a (batch, dim) matrix; batched gradients are summed.

``backward`` takes the gradient of the scalar objective with respect to
the *head output* (probabilities for softmax, the concatenated
(mean, log-std) vector for Gaussian heads) and returns gradients in the
same layout as ``net.params()``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Net",
    "Adam",
    "NonFiniteGradient",
    "make_net",
    "forward",
    "backward",
    "gaussian_sample",
    "gaussian_log_prob",
    "gaussian_log_prob_grad",
    "diag_gaussian_kl",
    "diag_gaussian_kl_grad",
    "step",
    "step_params",
    "net_to_dict",
    "net_from_dict",
]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
TINY = 1e-300

HIDDEN_FNS = ("tanh", "relu")
HEADS = ("softmax", "gaussian", "identity")


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN/inf; the pending update was skipped."""


class Net:
    """Dense net whose parameters live in one flat vector.

    ``weights``/``biases`` are reshaped views into ``flat``, so per-layer
    access and whole-net optimizer updates touch the same memory.
    """

    __slots__ = ("flat", "weights", "biases", "hidden", "head")

    def __init__(self, flat: np.ndarray, shapes: list, hidden: str, head: str):
        self.flat = flat
        self.hidden = hidden
        self.head = head
        self.weights, self.biases = [], []
        offset = 0
        for shape in shapes:
            size = shape[0] * shape[1]
            self.weights.append(flat[offset : offset + size].reshape(shape))
            offset += size
            self.biases.append(flat[offset : offset + shape[0]])
            offset += shape[0]

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def shapes(self) -> list:
        return [w.shape for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        d = self.weights[-1].shape[0]
        return d // 2 if self.head == "gaussian" else d

    def copy(self) -> "Net":
        return Net(self.flat.copy(), self.shapes, self.hidden, self.head)

    def __repr__(self):
        dims = [self.in_dim] + [w.shape[0] for w in self.weights]
        return f"Net({'-'.join(map(str, dims))}, hidden={self.hidden}, head={self.head})"


def _net_from_layers(weights, biases, hidden, head) -> Net:
    shapes = [w.shape for w in weights]
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.asarray(w, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
    return Net(np.concatenate(parts), shapes, hidden, head)


def make_net(sizes, rng: np.random.Generator, hidden: str = "tanh", head: str = "identity") -> Net:
    """Glorot-uniform weights, zero biases.

    ``sizes`` runs input -> hidden... -> output; for a Gaussian head the
    last entry is the action dimension (the final layer emits mean and
    log-std, twice that many units).
    """
    if hidden not in HIDDEN_FNS:
        raise ValueError(f"unknown hidden nonlinearity {hidden!r}")
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    dims = list(sizes)
    if len(dims) < 2:
        raise ValueError("need at least input and output sizes")
    if head == "gaussian":
        dims[-1] *= 2
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return _net_from_layers(weights, biases, hidden, head)


def _activate(net: Net, z: np.ndarray) -> np.ndarray:
    return np.tanh(z) if net.hidden == "tanh" else np.maximum(z, 0.0)


def _activate_grad(net: Net, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return 1.0 - a * a if net.hidden == "tanh" else (z > 0).astype(float)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _forward_full(net: Net, x: np.ndarray):
    """Pre-activations and activations for every layer (batch-shaped)."""
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.shape[1] != net.in_dim:
        raise ValueError(f"input dim {a.shape[1]} does not match net input {net.in_dim}")
    zs, acts = [], [a]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = acts[-1] @ w.T + b
        zs.append(z)
        acts.append(_activate(net, z) if i < len(net.weights) - 1 else z)
    return zs, acts


def forward(net: Net, x):
    """Head output for a single vector or a batch.

    softmax head: probability rows; gaussian head: (mean, log_std) with
    log_std clipped to [-5, 2]; identity head: raw linear output.
    """
    single = np.asarray(x).ndim == 1
    _, acts = _forward_full(net, x)
    raw = acts[-1]
    if net.head == "softmax":
        out = _softmax(raw)
        return out[0] if single else out
    if net.head == "gaussian":
        k = raw.shape[1] // 2
        mean = raw[:, :k]
        log_std = np.clip(raw[:, k:], LOG_STD_MIN, LOG_STD_MAX)
        if single:
            return mean[0], log_std[0]
        return mean, log_std
    return raw[0] if single else raw


def backward(net: Net, x, grad_out, cache=None) -> list:
    """Parameter gradients for sum over the batch of <grad_out, head out>.

    ``grad_out`` matches the head output layout; for a Gaussian head pass
    the concatenation (d/d mean, d/d log_std). Returns arrays in
    ``net.params()`` order. ``cache`` may hold the ``_forward_full``
    result for the same (net, x) to skip the recomputation.
    """
    single = np.asarray(x).ndim == 1
    zs, acts = cache if cache is not None else _forward_full(net, x)
    raw = acts[-1]
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    if net.head == "softmax":
        s = _softmax(raw)
        if g.shape != s.shape:
            raise ValueError(f"grad_out shape {g.shape} does not match output {s.shape}")
        dz = s * (g - np.sum(s * g, axis=1, keepdims=True))
    elif net.head == "gaussian":
        k = raw.shape[1] // 2
        if g.shape != raw.shape:
            raise ValueError(f"grad_out shape {g.shape} does not match (mean, log_std) layout {raw.shape}")
        inside = (raw[:, k:] > LOG_STD_MIN) & (raw[:, k:] < LOG_STD_MAX)
        dz = np.concatenate([g[:, :k], g[:, k:] * inside], axis=1)
    else:
        if g.shape != raw.shape:
            raise ValueError(f"grad_out shape {g.shape} does not match output {raw.shape}")
        dz = g

    grads: list = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = dz.T @ acts[i]
        grads[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            da = dz @ net.weights[i]
            dz = da * _activate_grad(net, zs[i - 1], acts[i])
    del single
    return grads


def gaussian_sample(params, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized draw mean + exp(log_std) * eps, eps ~ N(0, I)."""
    mean, log_std = params
    eps = rng.standard_normal(np.shape(mean))
    return mean + np.exp(log_std) * eps


def gaussian_log_prob(params, action) -> float:
    """Diagonal-Gaussian log density of ``action`` (sum over dimensions)."""
    mean, log_std = params
    z = (np.asarray(action) - mean) / np.exp(log_std)
    return float(np.sum(-0.5 * np.log(2.0 * np.pi) - log_std - 0.5 * z * z))


def gaussian_log_prob_grad(params, action):
    """d log N(action) / d (mean, log_std)."""
    mean, log_std = params
    var = np.exp(2.0 * log_std)
    diff = np.asarray(action) - mean
    d_mean = diff / var
    d_log_std = diff * diff / var - 1.0
    return d_mean, d_log_std


def diag_gaussian_kl(mean_p, log_std_p, mean_q, log_std_q) -> float:
    """KL(N_p || N_q) for diagonal Gaussians, in nats."""
    var_p = np.exp(2.0 * np.asarray(log_std_p))
    var_q = np.exp(2.0 * np.asarray(log_std_q))
    diff = np.asarray(mean_p) - np.asarray(mean_q)
    terms = np.asarray(log_std_q) - np.asarray(log_std_p) + (var_p + diff * diff) / (2.0 * var_q) - 0.5
    return float(np.sum(terms))


def diag_gaussian_kl_grad(mean_p, log_std_p, mean_q, log_std_q):
    """d KL / d (mean_p, log_std_p)."""
    var_p = np.exp(2.0 * np.asarray(log_std_p))
    var_q = np.exp(2.0 * np.asarray(log_std_q))
    diff = np.asarray(mean_p) - np.asarray(mean_q)
    return diff / var_q, var_p / var_q - 1.0


@dataclass
class Adam:
    lr: float = 3e-4
    decay1: float = 0.9
    decay2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not (0 < self.decay1 < 1 and 0 < self.decay2 < 1):
            raise ValueError("moment decay rates must lie in (0, 1)")


def step_params(opt: Adam, params: list, grads: list) -> None:
    """One adaptive-moment *descent* step, in place.

    Callers maximizing an objective pass the negated ascent gradient.
    Raises NonFiniteGradient (before touching params or moments) if any
    gradient entry is not finite.
    """
    for g in grads:
        # NaN/inf propagate through the sum, so this catches any bad entry
        if not np.isfinite(np.sum(g)):
            raise NonFiniteGradient("non-finite gradient; update skipped")
    if not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    opt.t += 1
    b1, b2 = opt.decay1, opt.decay2
    corr1 = 1.0 - b1 ** opt.t
    corr2 = 1.0 - b2 ** opt.t
    # algebraically identical to lr * (m/corr1) / (sqrt(v/corr2) + eps)
    scale = opt.lr * np.sqrt(corr2) / corr1
    eps_hat = opt.eps * np.sqrt(corr2)
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= scale * m / (np.sqrt(v) + eps_hat)


def step(opt: Adam, net: Net, grads: list) -> Net:
    """Apply a descent step to a net's parameters; returns the same net.

    The per-layer gradients are packed into one vector so the moment
    update runs on a single array.
    """
    flat_grad = np.concatenate([np.ravel(g) for g in grads])
    if flat_grad.size != net.flat.size:
        raise ValueError(f"gradient size {flat_grad.size} does not match {net.flat.size} parameters")
    step_params(opt, [net.flat], [flat_grad])
    return net


def net_to_dict(net: Net) -> dict:
    return {
        "hidden": net.hidden,
        "head": net.head,
        "shapes": [list(w.shape) for w in net.weights],
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def net_from_dict(doc: dict) -> Net:
    weights = [
        np.asarray(flat, dtype=float).reshape(shape)
        for flat, shape in zip(doc["weights"], doc["shapes"])
    ]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    return _net_from_layers(weights, biases, doc["hidden"], doc["head"])


def net_to_json(net: Net) -> str:
    return json.dumps(net_to_dict(net))


def net_from_json(text: str) -> Net:
    return net_from_dict(json.loads(text))
