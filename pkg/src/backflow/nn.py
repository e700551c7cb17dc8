"""Small dense networks with hand-written backpropagation, Adam and Gaussian heads.

Networks map a batch ``(n, in)`` (or a single vector) through tanh hidden
layers to a linear output.  Parameters are kept in a flat list
``[W0, b0, W1, b1, ...]`` with ``W`` of shape ``(in, out)``, which is also
the layout used by :class:`AdamState` and the checkpoint format.
"""

import json
import math

import numpy as np

from .exceptions import DivergenceError
from .validation import as_generator, check_scalar

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_VERSION = 1


def orthogonal(shape, gain, rng):
    """Random matrix with orthonormal rows or columns, scaled by ``gain``."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    # C order, so a reloaded checkpoint multiplies in the same memory layout
    return np.ascontiguousarray(gain * q[:rows, :cols])


class DenseNet:
    """Fully connected network: tanh hidden layers, linear output layer."""

    def __init__(self, sizes, seed=42, hidden_gain=math.sqrt(2.0), output_gain=1.0):
        sizes = [check_scalar(s, "layer size", min_val=1, integer=True) for s in sizes]
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output size")
        self.sizes = tuple(sizes)
        rng = as_generator(seed)
        self.params = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = output_gain if i == len(sizes) - 2 else hidden_gain
            self.params.append(orthogonal((n_in, n_out), gain, rng))
            self.params.append(np.zeros(n_out))

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        new = object.__new__(DenseNet)
        new.sizes = self.sizes
        new.params = [p.copy() for p in self.params]
        return new

    def _check_input(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0] or x.ndim > 2:
            raise ValueError(f"expected input of width {self.sizes[0]}, got shape {x.shape}")
        return x

    def forward(self, x, return_cache=False):
        """Network output; with ``return_cache`` also the activations for :meth:`backward`."""
        x = self._check_input(x)
        h = x
        acts = [x]
        for i in range(self.n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = np.tanh(z) if i < self.n_layers - 1 else z
            acts.append(h)
        return (h, acts) if return_cache else h

    __call__ = forward

    def backward(self, cache, grad_out, param_grads=True):
        """Reverse-mode pass.  Returns ``(param_grads, grad_input)``.

        Gradients are summed over the batch dimension, matching a loss that is
        the sum of per-sample terms times ``grad_out``.  With
        ``param_grads=False`` only the input gradient is formed (the first
        element is then ``None``).
        """
        acts = cache
        grad = np.asarray(grad_out, dtype=float)
        if grad.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {grad.shape} != output {acts[-1].shape}")
        grads = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            if i < self.n_layers - 1:
                grad = grad * (1.0 - acts[i + 1] ** 2)
            h_in = acts[i]
            if param_grads and grad.ndim == 1:
                grads[2 * i] = np.outer(h_in, grad)
                grads[2 * i + 1] = grad.copy()
            elif param_grads:
                grads[2 * i] = h_in.T @ grad
                grads[2 * i + 1] = grad.sum(axis=0)
            grad = grad @ self.params[2 * i].T
        return (grads if param_grads else None), grad

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size

    def all_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params)


def forward(net, x):
    return net.forward(x)


def backward(net, x, upstream):
    """Parameter and input gradients of ``sum(upstream * net(x))``."""
    _, cache = net.forward(x, return_cache=True)
    return net.backward(cache, upstream)


class AdamState:
    """Moment estimates for a list of parameter arrays."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = check_scalar(lr, "lr", min_val=0.0, include_min=False)
        self.beta1 = check_scalar(beta1, "beta1", min_val=0.0, max_val=1.0, include_max=False)
        self.beta2 = check_scalar(beta2, "beta2", min_val=0.0, max_val=1.0, include_max=False)
        self.eps = check_scalar(eps, "eps", min_val=0.0, include_min=False)
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step = 0

    def state_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step, "m": self.m, "v": self.v}


def adam_step(params, grads, state):
    """Bias-corrected Adam update of ``params`` in place; returns ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in Adam update", step=state.step)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def gaussian_log_density(x, mean, log_std):
    """Diagonal Gaussian log-density, summed over the last axis."""
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * LOG_2PI, axis=-1)


def log1m_tanh2(u):
    """``log(1 - tanh(u)**2)`` without cancellation for large ``|u|``."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


class GaussianPolicy:
    """Diagonal Gaussian with a state-independent learned log-std (PPO head)."""

    squashed = False

    def __init__(self, sizes, seed=42, init_log_std=0.0):
        self.net = DenseNet(sizes, seed=seed, output_gain=0.01)
        self.log_std = np.full(sizes[-1], float(init_log_std))

    @property
    def params(self):
        return self.net.params + [self.log_std]

    @property
    def act_dim(self):
        return self.net.sizes[-1]

    def clamped_log_std(self):
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, states):
        return self.net.forward(states)

    def sample(self, state, rng):
        """Draw ``a ~ N(mu(s), sigma^2)``; returns ``(action, log_prob)``."""
        mu = self.net.forward(state)
        log_std = self.clamped_log_std()
        action = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
        return action, float(gaussian_log_density(action, mu, log_std))

    def deterministic(self, state):
        return self.net.forward(state)

    def log_prob(self, states, actions):
        """Log-densities and a cache for :meth:`backward_log_prob`."""
        mu, cache = self.net.forward(states, return_cache=True)
        log_std = self.clamped_log_std()
        return gaussian_log_density(actions, mu, log_std), (cache, mu, actions, log_std)

    def backward_log_prob(self, cache, upstream):
        """Parameter gradients of ``sum(upstream * log_prob)``."""
        net_cache, mu, actions, log_std = cache
        upstream = np.asarray(upstream, dtype=float)[..., None]
        z = (actions - mu) * np.exp(-log_std)
        d_mu = upstream * z * np.exp(-log_std)
        d_log_std = np.sum(upstream * (z * z - 1.0), axis=0)
        d_log_std = d_log_std * ((self.log_std > LOG_STD_MIN) & (self.log_std < LOG_STD_MAX))
        grads, _ = self.net.backward(net_cache, d_mu)
        return grads + [d_log_std]

    def entropy(self):
        return float(np.sum(self.clamped_log_std() + 0.5 * (LOG_2PI + 1.0)))

    def copy(self):
        new = object.__new__(GaussianPolicy)
        new.net = self.net.copy()
        new.log_std = self.log_std.copy()
        return new


class SquashedGaussianPolicy:
    """State-dependent Gaussian squashed by ``tanh`` into ``[low, high]`` (SAC head).

    The network outputs the mean and the (clamped) log-std of the
    pre-squash variable ``u``; the action is ``center + scale * tanh(u)``.
    """

    squashed = True

    def __init__(self, sizes, low=-5.0, high=5.0, seed=42):
        sizes = list(sizes)
        self.act_dim = sizes[-1]
        self.net = DenseNet(sizes[:-1] + [2 * sizes[-1]], seed=seed, output_gain=0.01)
        self.low, self.high = float(low), float(high)

    @property
    def params(self):
        return self.net.params

    @property
    def scale(self):
        return 0.5 * (self.high - self.low)

    @property
    def center(self):
        return 0.5 * (self.high + self.low)

    def _split(self, out):
        mu = out[..., :self.act_dim]
        raw = out[..., self.act_dim:]
        return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX), raw

    def rsample(self, states, noise):
        """Reparameterized action and log-density for fixed standard-normal ``noise``."""
        out, net_cache = self.net.forward(states, return_cache=True)
        mu, log_std, raw = self._split(out)
        std = np.exp(log_std)
        u = mu + std * noise
        t = np.tanh(u)
        action = self.center + self.scale * t
        logp = (np.sum(-0.5 * noise * noise - log_std - 0.5 * LOG_2PI - log1m_tanh2(u), axis=-1)
                - self.act_dim * math.log(self.scale))
        return action, logp, (net_cache, raw, std, noise, t)

    def backward(self, cache, d_action, d_logp):
        """Parameter gradients of ``sum(d_action * action) + sum(d_logp * logp)``."""
        net_cache, raw, std, noise, t = cache
        d_logp = np.asarray(d_logp, dtype=float)[..., None]
        d_u = d_action * self.scale * (1.0 - t * t) + d_logp * 2.0 * t
        d_mu = d_u
        d_log_std = d_u * std * noise - d_logp
        d_log_std = d_log_std * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
        grads, _ = self.net.backward(net_cache, np.concatenate([d_mu, d_log_std], axis=-1))
        return grads

    def sample(self, state, rng):
        noise = rng.standard_normal(self.act_dim)
        action, logp, _ = self.rsample(state, noise)
        return action, float(logp)

    def deterministic(self, state):
        mu, _, _ = self._split(self.net.forward(state))
        return self.center + self.scale * np.tanh(mu)

    def copy(self):
        new = object.__new__(SquashedGaussianPolicy)
        new.__dict__.update(self.__dict__)
        new.net = self.net.copy()
        return new


def gaussian_sample_and_logprob(head, state, rng):
    """Sample an action from ``head`` at ``state``; returns ``(action, log_prob)``."""
    return head.sample(state, rng)


def _encode_array(a):
    return {"shape": list(a.shape), "data": [float(f"{v:.17g}") for v in a.ravel()]}


def _decode_array(d):
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def save_checkpoint(path, networks, arrays=None, rng=None, meta=None):
    """Write networks (name -> DenseNet), extra arrays and an RNG state as JSON."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "networks": {name: {"sizes": list(net.sizes),
                            "params": [_encode_array(p) for p in net.params]}
                     for name, net in sorted(networks.items())},
        "arrays": {name: _encode_array(np.asarray(a, dtype=float))
                   for name, a in sorted((arrays or {}).items())},
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(networks, arrays, rng, meta)``."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    networks = {}
    for name, spec in doc["networks"].items():
        net = object.__new__(DenseNet)
        net.sizes = tuple(spec["sizes"])
        net.params = [_decode_array(p) for p in spec["params"]]
        networks[name] = net
    arrays = {name: _decode_array(a) for name, a in doc["arrays"].items()}
    rng = None
    if doc["rng_state"] is not None:
        rng = np.random.default_rng()
        rng.bit_generator.state = doc["rng_state"]
    return networks, arrays, rng, doc["meta"]
