"""Small reverse-mode differentiable building blocks in float64 numpy.

Only what the models here need: dense feed-forward stacks, one LSTM cell,
binary cross-entropy and Adam.  Every parameter array of a network is a view
into one flat buffer (and likewise for gradients) so the optimizer works on a
single contiguous vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("leaky_relu", "sigmoid", "tanh", "linear")
LEAKY_SLOPE = 0.2
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(kind: str, z: np.ndarray, slope: float) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(z > 0, z, slope * z)
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray, slope: float) -> np.ndarray:
    if kind == "leaky_relu":
        return np.where(z > 0, 1.0, slope)
    if kind == "sigmoid":
        return a * (1.0 - a)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class DenseLayer:
    """Affine map followed by an elementwise activation.

    ``weights`` has shape ``(out, in)``.  Parameters and gradients are views
    supplied by the owning :class:`Network`; a standalone layer allocates its
    own buffers.
    """

    def __init__(self, in_dim: int, out_dim: int, activation: str = "linear",
                 slope: float = LEAKY_SLOPE, param_buf=None, grad_buf=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.slope = slope
        n = out_dim * in_dim + out_dim
        if param_buf is None:
            param_buf = np.zeros(n)
        if grad_buf is None:
            grad_buf = np.zeros(n)
        self.weights = param_buf[: out_dim * in_dim].reshape(out_dim, in_dim)
        self.bias = param_buf[out_dim * in_dim:]
        self.weight_grad = grad_buf[: out_dim * in_dim].reshape(out_dim, in_dim)
        self.bias_grad = grad_buf[out_dim * in_dim:]
        self._cache = None

    @staticmethod
    def n_params(in_dim: int, out_dim: int) -> int:
        return out_dim * in_dim + out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x @ self.weights.T + self.bias
        a = _activate(self.activation, z, self.slope)
        self._cache = (x, z, a)
        return a

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward called before forward")
        x, z, a = self._cache
        dz = grad_out * _activation_grad(self.activation, z, a, self.slope)
        np.matmul(dz.T, x, out=self.weight_grad)
        np.sum(dz, axis=0, out=self.bias_grad)
        return dz @ self.weights


class Network:
    """Stack of dense layers sharing one flat parameter/gradient buffer."""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str],
                 seed: int | None = None, rng: np.random.Generator | None = None,
                 slope: float = LEAKY_SLOPE):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if len(activations) != len(sizes) - 1:
            raise ValueError("one activation per layer required")
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.slope = slope
        total = sum(DenseLayer.n_params(i, o) for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        self.params = np.zeros(total)
        self.grads = np.zeros(total)
        self.layers: list[DenseLayer] = []
        off = 0
        for (i, o), act in zip(zip(self.sizes[:-1], self.sizes[1:]), self.activations):
            n = DenseLayer.n_params(i, o)
            self.layers.append(DenseLayer(i, o, act, slope,
                                          self.params[off:off + n], self.grads[off:off + n]))
            off += n
        if rng is None:
            rng = np.random.default_rng(seed)
        self.init_params(rng)
        self._forwarded = False

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def init_params(self, rng: np.random.Generator) -> None:
        """Uniform Glorot weights, zero biases."""
        for layer in self.layers:
            lim = glorot_limit(layer.in_dim, layer.out_dim)
            layer.weights[...] = rng.uniform(-lim, lim, size=layer.weights.shape)
            layer.bias[...] = 0.0

    def forward(self, batch: np.ndarray) -> list[np.ndarray]:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeError(f"expected (n, {self.input_dim}) input, got {batch.shape}")
        outs = []
        h = batch
        for layer in self.layers:
            h = layer.forward(h)
            outs.append(h)
        self._forwarded = True
        return outs

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)[-1]

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Forward pass that leaves the backward cache untouched."""
        h = np.asarray(batch, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ShapeError(f"expected (n, {self.input_dim}) input, got {h.shape}")
        for layer in self.layers:
            h = _activate(layer.activation, h @ layer.weights.T + layer.bias, layer.slope)
        return h

    def backward(self, upstream_grad: np.ndarray) -> np.ndarray:
        """Fill ``self.grads`` and return d(loss)/d(input batch)."""
        if not self._forwarded:
            raise StateError("backward called before forward")
        g = np.asarray(upstream_grad, dtype=np.float64)
        out_shape = self.layers[-1]._cache[2].shape
        if g.shape != out_shape:
            raise ShapeError(f"upstream gradient shape {g.shape} != output shape {out_shape}")
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def copy(self) -> "Network":
        other = Network(self.sizes, self.activations, rng=np.random.default_rng(0), slope=self.slope)
        other.params[...] = self.params
        return other


def bce_loss(predictions: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on clamped probabilities.

    The gradient is taken at the clamped value (the clamp is treated as
    identity), so saturated wrong predictions still push back.
    """
    p = np.clip(np.asarray(predictions, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeError(f"predictions {p.shape} vs targets {t.shape}")
    n = p.shape[0]
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    grad = (p - t) / (p * (1.0 - p)) / n
    return float(loss), grad


@dataclass
class AdamState:
    size: int
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon_num: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        self._scratch = np.empty(self.size)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    """In-place bias-corrected Adam update; returns ``params``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeError(f"shape mismatch: params {params.shape}, grads {grads.shape}, "
                         f"state {state.m.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    tmp = state._scratch
    # in place: this runs three times per batch on ~2e5 parameters
    state.m *= b1
    np.multiply(grads, 1.0 - b1, out=tmp)
    state.m += tmp
    state.v *= b2
    np.multiply(grads, grads, out=tmp)
    tmp *= 1.0 - b2
    state.v += tmp
    # p -= lr * m_hat / (sqrt(v_hat) + eps)
    np.sqrt(state.v, out=tmp)
    tmp *= 1.0 / np.sqrt(1.0 - b2 ** state.t)
    tmp += state.epsilon_num
    np.divide(state.m, tmp, out=tmp)
    tmp *= state.learning_rate / (1.0 - b1 ** state.t)
    params -= tmp
    return params


class LSTMCell:
    """Standard LSTM cell with backpropagation through time.

    Gate order inside the stacked weight matrix is input, forget, output,
    candidate; each gate block is ``[hidden, input + hidden]``.
    """

    GATES = ("input", "forget", "output", "candidate")

    def __init__(self, input_dim: int, hidden_dim: int, seed: int | None = None,
                 rng: np.random.Generator | None = None, param_buf=None, grad_buf=None):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        h, k = hidden_dim, input_dim + hidden_dim
        n = self.n_params(input_dim, hidden_dim)
        self.params = np.zeros(n) if param_buf is None else param_buf
        self.grads = np.zeros(n) if grad_buf is None else grad_buf
        self.weights = self.params[: 4 * h * k].reshape(4 * h, k)
        self.bias = self.params[4 * h * k:]
        self.weight_grad = self.grads[: 4 * h * k].reshape(4 * h, k)
        self.bias_grad = self.grads[4 * h * k:]
        if rng is None:
            rng = np.random.default_rng(seed)
        lim = glorot_limit(k, h)
        self.weights[...] = rng.uniform(-lim, lim, size=self.weights.shape)
        self.bias[...] = 0.0
        self.bias[h:2 * h] = 1.0  # forget-gate bias
        self._cache = None

    @staticmethod
    def n_params(input_dim: int, hidden_dim: int) -> int:
        return 4 * hidden_dim * (input_dim + hidden_dim) + 4 * hidden_dim

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        i = self.GATES.index(name)
        h = self.hidden_dim
        return self.weights[i * h:(i + 1) * h], self.bias[i * h:(i + 1) * h]

    def forward(self, sequence: Sequence[np.ndarray]) -> list[np.ndarray]:
        if len(sequence) == 0:
            raise ValueError("empty sequence")
        h_dim = self.hidden_dim
        n = np.asarray(sequence[0]).shape[0]
        h = np.zeros((n, h_dim))
        c = np.zeros((n, h_dim))
        steps = []
        hs = []
        for x in sequence:
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != self.input_dim:
                raise ShapeError(f"expected (n, {self.input_dim}) step, got {x.shape}")
            xh = np.concatenate([x, h], axis=1)
            pre = xh @ self.weights.T + self.bias
            i = sigmoid(pre[:, :h_dim])
            f = sigmoid(pre[:, h_dim:2 * h_dim])
            o = sigmoid(pre[:, 2 * h_dim:3 * h_dim])
            g = np.tanh(pre[:, 3 * h_dim:])
            c_prev = c
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            steps.append((xh, i, f, o, g, c_prev, tc))
            hs.append(h)
        self._cache = steps
        return hs

    def backward(self, hidden_grads: Sequence[np.ndarray | None]) -> list[np.ndarray]:
        """Backprop through time.

        ``hidden_grads[t]`` is d(loss)/d(h_t) (``None`` for zero).  Fills the
        gradient buffers and returns d(loss)/d(x_t) for every step.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        steps = self._cache
        if len(hidden_grads) != len(steps):
            raise ShapeError("one hidden gradient per step required")
        h_dim, d_in = self.hidden_dim, self.input_dim
        self.grads[...] = 0.0
        n = steps[0][0].shape[0]
        dh_next = np.zeros((n, h_dim))
        dc_next = np.zeros((n, h_dim))
        dxs = [None] * len(steps)
        for t in range(len(steps) - 1, -1, -1):
            xh, i, f, o, g, c_prev, tc = steps[t]
            dh = dh_next if hidden_grads[t] is None else dh_next + hidden_grads[t]
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dpre = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                                   do * o * (1.0 - o), dg * (1.0 - g * g)], axis=1)
            self.weight_grad += dpre.T @ xh
            self.bias_grad += dpre.sum(axis=0)
            dxh = dpre @ self.weights
            dxs[t] = dxh[:, :d_in]
            dh_next = dxh[:, d_in:]
            dc_next = dc * f
        return dxs


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-6,
                           indices=None) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for k in idx:
        old = flat[k]
        flat[k] = old + step
        up = f()
        flat[k] = old - step
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
