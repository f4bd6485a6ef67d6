"""Minimal differentiable dense-math layer.

Parameters live in a :class:`ParamStore`; every op is a forward function that
returns its output together with an explicit cache, plus a hand-derived
backward that accumulates into ``Param.grad`` and returns the input gradient.
There is no graph tracing: composite losses run their backward passes by hand,
in reverse order of the forward calls.

Everything computes in float64. 2-D arrays are batches (one row per example);
1-D inputs are accepted where noted and treated as a single row.
"""

from __future__ import annotations

import hashlib
import warnings

import numpy as np
from scipy.special import expit

from .errors import (
    DegenerateTargetsWarning,
    DimensionError,
    GradCheckError,
    NumericError,
)

Array = np.ndarray

LOGVAR_MIN = -20.0
LOGVAR_MAX = 20.0


def rng_from(seed, *key):
    """Deterministic generator for ``(seed, *key)``.

    This is the repo-wide stream convention: every subsystem derives its
    generators through this helper with a fixed integer salt plus natural
    keys (user index, item index, ...), so sampling is reproducible and
    independent of iteration or scheduling order.
    """
    return np.random.default_rng((int(seed),) + tuple(int(k) for k in key))


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise DimensionError(f"expected 1-D or 2-D array, got shape {x.shape}")


class Param:
    """A named weight matrix/vector with a same-shaped gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


class ParamStore:
    """Ordered name -> Param mapping; the single owner of trainable state."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name, shape, rng=None):
        """Register a new parameter.

        With ``rng`` the value is drawn uniform in [-1/sqrt(fan_in),
        +1/sqrt(fan_in)] (fan_in = first dimension); without it the value is
        zeros (biases).
        """
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if rng is None:
            value = np.zeros(shape, dtype=np.float64)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            value = rng.uniform(-bound, bound, size=shape)
        p = Param(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self):
        return list(self._params)

    def n_entries(self):
        return sum(p.value.size for p in self)

    def zero_grad(self):
        for p in self:
            p.grad[...] = 0.0

    def copy_values(self):
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_values(self, values):
        for name, p in self._params.items():
            v = np.asarray(values[name], dtype=np.float64)
            if v.shape != p.value.shape:
                raise DimensionError(
                    f"parameter {name!r}: expected shape {p.value.shape}, got {v.shape}"
                )
            p.value[...] = v

    def values_hash(self):
        """SHA-256 over all parameter bytes, in registration order."""
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.value).tobytes())
        return h.hexdigest()


class Linear:
    """y = x @ W + b."""

    def __init__(self, store, prefix, n_in, n_out, rng):
        self.W = store.add(f"{prefix}.W", (n_in, n_out), rng)
        self.b = store.add(f"{prefix}.b", (n_out,))

    def forward(self, x):
        if x.shape[-1] != self.W.shape[0]:
            raise DimensionError(
                f"{self.W.name}: input width {x.shape[-1]} != {self.W.shape[0]}"
            )
        return x @ self.W.value + self.b.value, x

    def backward(self, dy, cache):
        x = cache
        self.W.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


class AffineTanh(Linear):
    """y = tanh(x @ W + b); the output is cached for the backward pass."""

    def forward(self, x):
        pre, _ = super().forward(x)
        y = np.tanh(pre)
        return y, (x, y)

    def backward(self, dy, cache):
        x, y = cache
        dpre = dy * (1.0 - y * y)
        return super().backward(dpre, x)


class GRUCell:
    """Single gated-recurrent step with hand-derived backward.

    z = sigmoid(x W_z + h U_z + b_z)        (update gate)
    r = sigmoid(x W_r + h U_r + b_r)        (reset gate)
    n = tanh(x W_n + (r * h) U_n + b_n)     (candidate)
    h' = (1 - z) * h + z * n

    Reset is applied to h before the recurrent matmul (original gate wiring).
    """

    def __init__(self, store, prefix, n_in, n_hidden, rng):
        self.n_in = n_in
        self.n_hidden = n_hidden
        add = store.add
        self.W_z = add(f"{prefix}.W_z", (n_in, n_hidden), rng)
        self.U_z = add(f"{prefix}.U_z", (n_hidden, n_hidden), rng)
        self.b_z = add(f"{prefix}.b_z", (n_hidden,))
        self.W_r = add(f"{prefix}.W_r", (n_in, n_hidden), rng)
        self.U_r = add(f"{prefix}.U_r", (n_hidden, n_hidden), rng)
        self.b_r = add(f"{prefix}.b_r", (n_hidden,))
        self.W_n = add(f"{prefix}.W_n", (n_in, n_hidden), rng)
        self.U_n = add(f"{prefix}.U_n", (n_hidden, n_hidden), rng)
        self.b_n = add(f"{prefix}.b_n", (n_hidden,))

    def forward(self, h, x):
        if x.shape[-1] != self.n_in or h.shape[-1] != self.n_hidden:
            raise DimensionError(
                f"gru: got x width {x.shape[-1]} (want {self.n_in}), "
                f"h width {h.shape[-1]} (want {self.n_hidden})"
            )
        z = expit(x @ self.W_z.value + h @ self.U_z.value + self.b_z.value)
        r = expit(x @ self.W_r.value + h @ self.U_r.value + self.b_r.value)
        rh = r * h
        n = np.tanh(x @ self.W_n.value + rh @ self.U_n.value + self.b_n.value)
        h_new = (1.0 - z) * h + z * n
        return h_new, (h, x, z, r, rh, n)

    def backward(self, dh_new, cache):
        h, x, z, r, rh, n = cache
        dz = dh_new * (n - h)
        dn = dh_new * z
        dh = dh_new * (1.0 - z)

        da_n = dn * (1.0 - n * n)
        self.W_n.grad += x.T @ da_n
        self.U_n.grad += rh.T @ da_n
        self.b_n.grad += da_n.sum(axis=0)
        drh = da_n @ self.U_n.value.T
        dr = drh * h
        dh += drh * r
        dx = da_n @ self.W_n.value.T

        da_z = dz * z * (1.0 - z)
        self.W_z.grad += x.T @ da_z
        self.U_z.grad += h.T @ da_z
        self.b_z.grad += da_z.sum(axis=0)
        dx += da_z @ self.W_z.value.T
        dh += da_z @ self.U_z.value.T

        da_r = dr * r * (1.0 - r)
        self.W_r.grad += x.T @ da_r
        self.U_r.grad += h.T @ da_r
        self.b_r.grad += da_r.sum(axis=0)
        dx += da_r @ self.W_r.value.T
        dh += da_r @ self.U_r.value.T
        return dh, dx


def gaussian_kl(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)) = 0.5 * sum(exp(lv) + mu^2 - 1 - lv).

    Computed as 0.5 * sum(mu^2 + expm1(lv) - lv) so the result stays >= 0
    in floating point near the optimum. Returns a scalar for 1-D inputs,
    a per-row vector for 2-D batches.
    """
    mu_b, single = _as_batch(mu)
    lv_b, _ = _as_batch(logvar)
    if mu_b.shape != lv_b.shape:
        raise DimensionError(f"mu shape {mu_b.shape} != logvar shape {lv_b.shape}")
    if not (np.isfinite(mu_b).all() and np.isfinite(lv_b).all()):
        raise NumericError("gaussian_kl: non-finite input")
    kl = 0.5 * (mu_b * mu_b + np.expm1(lv_b) - lv_b).sum(axis=-1)
    return float(kl[0]) if single else kl


def gaussian_kl_grad(mu, logvar):
    """(d KL/d mu, d KL/d logvar) for the sum-over-entries KL above."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return mu.copy(), 0.5 * np.expm1(logvar)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(ds, s):
    """Backward of s = softmax(logits) given upstream ds."""
    return s * (ds - (ds * s).sum(axis=-1, keepdims=True))


def multinomial_loglik(logits, targets):
    """sum_i targets_i * log softmax(logits)_i, per row.

    Returns a scalar for 1-D inputs, a per-row vector for batches. A row of
    all-zero targets is degenerate but legal: it contributes 0 and raises a
    DegenerateTargetsWarning.
    """
    lg, single = _as_batch(logits)
    tg, _ = _as_batch(targets)
    if lg.shape != tg.shape:
        raise DimensionError(f"logits shape {lg.shape} != targets shape {tg.shape}")
    totals = tg.sum(axis=-1)
    if np.any(totals == 0):
        warnings.warn(
            "multinomial_loglik: all-zero target row(s), log-likelihood is 0",
            DegenerateTargetsWarning,
            stacklevel=2,
        )
    ll = (tg * log_softmax(lg)).sum(axis=-1)
    return float(ll[0]) if single else ll


def multinomial_loglik_grad(logits, targets):
    """d loglik / d logits = targets - (sum targets) * softmax(logits)."""
    lg, single = _as_batch(logits)
    tg, _ = _as_batch(targets)
    grad = tg - tg.sum(axis=-1, keepdims=True) * softmax(lg)
    return grad[0] if single else grad


def dropout_mask(rng, shape, rate):
    """Inverted-dropout mask: keep with prob 1-rate, scale kept units."""
    if rate <= 0.0:
        return np.ones(shape, dtype=np.float64)
    return (rng.random(shape) >= rate) / (1.0 - rate)


class Adam:
    """Adaptive-moment SGD, canonical bias-corrected update rule."""

    def __init__(self, store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in store}
        self._v = {p.name: np.zeros_like(p.value) for p in store}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for p in self.store:
            m = self._m[p.name]
            v = self._v[p.name]
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def grad_check(loss_fn, store, eps=1e-4):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` must be a pure scalar function of the store's parameters
    that accumulates analytic gradients into them when called. Relative error
    uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    store.zero_grad()
    base = float(loss_fn())
    analytic = {p.name: p.grad.copy() for p in store}
    store.zero_grad()
    if float(loss_fn()) != base:
        raise GradCheckError("loss_fn is not deterministic; gradient check invalid")

    worst = 0.0
    for p in store:
        flat = p.value.reshape(-1)
        a_flat = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn())
            flat[i] = orig - eps
            lm = float(loss_fn())
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    return worst
