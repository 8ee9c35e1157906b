"""Bidirectional multi-layer LSTM with a linear head, trained by hand-written BPTT.

Everything runs in float64. Parameters for the two directions of a layer are
stacked on a leading axis of size 2 (index 0 = forward, 1 = backward) and gates
are ordered ``i, f, g, o`` along the ``4h`` axis.

Batches are ``(B, T, d)`` arrays with per-sequence ``lengths``; padded frames
never influence valid frames. The backward direction reverses each sequence
within its own length, so padding stays at the tail in both directions.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .errors import BadLabel, Empty, LengthMismatch, ShapeMismatch

DIRECTIONS = 2


@dataclass
class LstmLayer:
    W: np.ndarray  # (2, 4h, d)
    U: np.ndarray  # (2, 4h, h)
    b: np.ndarray  # (2, 4h)

    def __post_init__(self):
        z, g, d = self.W.shape
        h = g // 4
        if z != DIRECTIONS or g != 4 * h or self.U.shape != (z, g, h) or self.b.shape != (z, g):
            raise ShapeMismatch(
                f"inconsistent LSTM layer shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )

    @property
    def hidden_size(self) -> int:
        return self.U.shape[2]

    @property
    def input_size(self) -> int:
        return self.W.shape[2]

    def direction(self, reverse: bool):
        k = 1 if reverse else 0
        return self.W[k], self.U[k], self.b[k]


@dataclass
class BiLstmStack:
    layers: list[LstmLayer]

    def __post_init__(self):
        for prev, layer in zip(self.layers, self.layers[1:]):
            if layer.input_size != 2 * prev.hidden_size:
                raise ShapeMismatch("layer input width must equal twice the previous hidden size")

    @property
    def input_size(self) -> int:
        return self.layers[0].input_size

    @property
    def hidden_size(self) -> int:
        return self.layers[0].hidden_size

    @property
    def output_size(self) -> int:
        return 2 * self.layers[-1].hidden_size

    @property
    def num_layers(self) -> int:
        return len(self.layers)


@dataclass
class LinearHead:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeMismatch(f"bad head shapes {self.weight.shape}, {self.bias.shape}")


def init_stack(input_size=40, hidden_size=16, num_layers=3, rng=None) -> BiLstmStack:
    """Uniform(+-1/sqrt(h)) weights, forget-gate bias 1, other biases 0."""
    rng = np.random.default_rng(rng)
    bound = 1.0 / np.sqrt(hidden_size)
    g = 4 * hidden_size
    layers = []
    d = input_size
    for _ in range(num_layers):
        W = rng.uniform(-bound, bound, size=(DIRECTIONS, g, d))
        U = rng.uniform(-bound, bound, size=(DIRECTIONS, g, hidden_size))
        b = np.zeros((DIRECTIONS, g))
        b[:, hidden_size:2 * hidden_size] = 1.0
        layers.append(LstmLayer(W, U, b))
        d = 2 * hidden_size
    return BiLstmStack(layers)


def zero_stack(input_size=40, hidden_size=16, num_layers=3) -> BiLstmStack:
    g = 4 * hidden_size
    layers = []
    d = input_size
    for _ in range(num_layers):
        layers.append(LstmLayer(np.zeros((DIRECTIONS, g, d)),
                                np.zeros((DIRECTIONS, g, hidden_size)),
                                np.zeros((DIRECTIONS, g))))
        d = 2 * hidden_size
    return BiLstmStack(layers)


def init_head(in_size, out_size, rng=None) -> LinearHead:
    rng = np.random.default_rng(rng)
    bound = 1.0 / np.sqrt(in_size)
    return LinearHead(rng.uniform(-bound, bound, size=(out_size, in_size)), np.zeros(out_size))


# ---------------------------------------------------------------------------
# recurrence kernels, time-major: (Z directions, T, B, features)
# ---------------------------------------------------------------------------

def _scan_forward(xproj, U):
    Z, T, B, G = xproj.shape
    h = G // 4
    Ut = U.transpose(0, 2, 1)
    H = np.empty((Z, T, B, h))
    C = np.empty((Z, T, B, h))
    TC = np.empty((Z, T, B, h))
    A = np.empty((Z, T, B, G))
    hp = np.zeros((Z, B, h))
    cp = np.zeros((Z, B, h))
    for t in range(T):
        a = A[:, t]
        np.add(xproj[:, t], hp @ Ut, out=a)
        expit(a[..., :2 * h], out=a[..., :2 * h])
        np.tanh(a[..., 2 * h:3 * h], out=a[..., 2 * h:3 * h])
        expit(a[..., 3 * h:], out=a[..., 3 * h:])
        cp = a[..., h:2 * h] * cp + a[..., :h] * a[..., 2 * h:3 * h]
        tc = np.tanh(cp)
        hp = a[..., 3 * h:] * tc
        C[:, t] = cp
        TC[:, t] = tc
        H[:, t] = hp
    return H, C, TC, A


def _scan_backward(dH, H, C, TC, A, U):
    Z, T, B, G = A.shape
    h = G // 4
    dPre = np.empty_like(A)
    dh = np.zeros((Z, B, h))
    dc = np.zeros((Z, B, h))
    zeros = np.zeros((Z, B, h))
    for t in range(T - 1, -1, -1):
        a = A[:, t]
        i, f, g, o = a[..., :h], a[..., h:2 * h], a[..., 2 * h:3 * h], a[..., 3 * h:]
        tc = TC[:, t]
        c_prev = C[:, t - 1] if t > 0 else zeros
        dh = dh + dH[:, t]
        dc = dc + dh * o * (1.0 - tc * tc)
        d = dPre[:, t]
        d[..., :h] = dc * g * i * (1.0 - i)
        d[..., h:2 * h] = dc * c_prev * f * (1.0 - f)
        d[..., 2 * h:3 * h] = dc * i * (1.0 - g * g)
        d[..., 3 * h:] = dh * tc * o * (1.0 - o)
        dc = dc * f
        dh = d @ U
    H_prev = np.concatenate([np.zeros((Z, 1, B, h)), H[:, :-1]], axis=1)
    dU = dPre.reshape(Z, T * B, G).transpose(0, 2, 1) @ H_prev.reshape(Z, T * B, h)
    return dPre, dU


def _reverse_index(lengths, T):
    """Per-sequence time reversal within each length; identity on padding."""
    t = np.arange(T)[None, :]
    L = np.asarray(lengths)[:, None]
    return np.where(t < L, L - 1 - t, t)


@dataclass
class _LayerCache:
    X: np.ndarray
    H: np.ndarray
    C: np.ndarray
    TC: np.ndarray
    A: np.ndarray


def _layer_forward(layer, x, mask, rev, bidx):
    B, T, d = x.shape
    h = layer.hidden_size
    X = np.stack([x, x[bidx, rev]]).transpose(0, 2, 1, 3)  # (2, T, B, d)
    X = np.ascontiguousarray(X)
    xproj = (X.reshape(DIRECTIONS, T * B, d) @ layer.W.transpose(0, 2, 1)
             + layer.b[:, None, :]).reshape(DIRECTIONS, T, B, 4 * h)
    H, C, TC, A = _scan_forward(xproj, layer.U)
    fwd = H[0].transpose(1, 0, 2)
    bwd = H[1].transpose(1, 0, 2)[bidx, rev]
    out = np.concatenate([fwd, bwd], axis=2) * mask[..., None]
    return out, _LayerCache(X, H, C, TC, A)


def _layer_backward(layer, cache, dout, mask, rev, bidx):
    B, T, _ = dout.shape
    h = layer.hidden_size
    G = 4 * h
    d = layer.input_size
    dout = dout * mask[..., None]
    dH = np.stack([dout[..., :h], dout[..., h:][bidx, rev]]).transpose(0, 2, 1, 3)
    dPre, dU = _scan_backward(dH, cache.H, cache.C, cache.TC, cache.A, layer.U)
    flat = dPre.reshape(DIRECTIONS, T * B, G)
    dW = flat.transpose(0, 2, 1) @ cache.X.reshape(DIRECTIONS, T * B, d)
    db = flat.sum(axis=1)
    dX = (flat @ layer.W).reshape(DIRECTIONS, T, B, d).transpose(0, 2, 1, 3)
    dx = dX[0] + dX[1][bidx, rev]
    return dx, dW, dU, db


@dataclass
class ForwardCache:
    x: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray
    rev: np.ndarray
    layer_inputs: list
    layer_caches: list
    latents: np.ndarray
    pooled: np.ndarray | None = None


@dataclass
class BiLstmNet:
    """LSTM stack plus linear head.

    With ``pool=False`` the head is applied per frame, giving logits of shape
    ``(B, T, out)``; with ``pool=True`` latents are averaged over each
    sequence's valid frames first, giving ``(B, out)``.
    """

    stack: BiLstmStack
    head: LinearHead
    pool: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head.weight.shape[1] != self.stack.output_size:
            raise ShapeMismatch(
                f"head input width {self.head.weight.shape[1]} != stack output "
                f"width {self.stack.output_size}"
            )

    @classmethod
    def create(cls, out_size, input_size=40, hidden_size=16, num_layers=3, pool=False, rng=None):
        rng = np.random.default_rng(rng)
        stack = init_stack(input_size, hidden_size, num_layers, rng)
        return cls(stack, init_head(stack.output_size, out_size, rng), pool)

    @classmethod
    def zeros(cls, out_size, input_size=40, hidden_size=16, num_layers=3, pool=False):
        stack = zero_stack(input_size, hidden_size, num_layers)
        head = LinearHead(np.zeros((out_size, stack.output_size)), np.zeros(out_size))
        return cls(stack, head, pool)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for k, layer in enumerate(self.stack.layers):
            params[f"lstm.{k}.W"] = layer.W
            params[f"lstm.{k}.U"] = layer.U
            params[f"lstm.{k}.b"] = layer.b
        params["head.weight"] = self.head.weight
        params["head.bias"] = self.head.bias
        return params

    def copy(self) -> "BiLstmNet":
        return copy.deepcopy(self)

    def forward(self, x, lengths=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.stack.input_size:
            raise ShapeMismatch(
                f"expected input (B, T, {self.stack.input_size}), got {x.shape}"
            )
        B, T, _ = x.shape
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (B,) or np.any(lengths < 1) or np.any(lengths > T):
            raise ShapeMismatch("lengths must be in [1, T] for each sequence")
        mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
        rev = _reverse_index(lengths, T)
        bidx = np.arange(B)[:, None]

        h = x * mask[..., None]
        inputs, caches = [], []
        for layer in self.stack.layers:
            inputs.append(h)
            h, c = _layer_forward(layer, h, mask, rev, bidx)
            caches.append(c)
        cache = ForwardCache(x, mask, lengths, rev, inputs, caches, h)
        if self.pool:
            cache.pooled = h.sum(axis=1) / lengths[:, None]
            logits = cache.pooled @ self.head.weight.T + self.head.bias
        else:
            logits = h @ self.head.weight.T + self.head.bias
        return logits, cache

    def backward(self, cache: ForwardCache, dlogits) -> dict[str, np.ndarray]:
        """Exact parameter gradients given d(loss)/d(logits) from :meth:`forward`."""
        dlogits = np.asarray(dlogits, dtype=np.float64)
        grads = {}
        if self.pool:
            grads["head.weight"] = dlogits.T @ cache.pooled
            grads["head.bias"] = dlogits.sum(axis=0)
            dpooled = dlogits @ self.head.weight
            dh = dpooled[:, None, :] * (cache.mask / cache.lengths[:, None])[..., None]
        else:
            out = dlogits.shape[-1]
            flat = dlogits.reshape(-1, out)
            grads["head.weight"] = flat.T @ cache.latents.reshape(-1, cache.latents.shape[-1])
            grads["head.bias"] = flat.sum(axis=0)
            dh = dlogits @ self.head.weight
        bidx = np.arange(len(cache.lengths))[:, None]
        for k in range(self.stack.num_layers - 1, -1, -1):
            layer = self.stack.layers[k]
            dh, dW, dU, db = _layer_backward(layer, cache.layer_caches[k], dh,
                                             cache.mask, cache.rev, bidx)
            grads[f"lstm.{k}.W"] = dW
            grads[f"lstm.{k}.U"] = dU
            grads[f"lstm.{k}.b"] = db
        return {name: grads[name] for name in self.parameters()}


# ---------------------------------------------------------------------------
# single-sequence entry points
# ---------------------------------------------------------------------------

def lstm_direction_forward(W, U, b, inputs, reverse=False) -> np.ndarray:
    """One LSTM direction over a ``(T, d)`` sequence with zero initial state."""
    W, U, b = (np.asarray(a, dtype=np.float64) for a in (W, U, b))
    x = np.asarray(inputs, dtype=np.float64)
    G, d = W.shape
    h = G // 4
    if G != 4 * h or U.shape != (G, h) or b.shape != (G,) or x.ndim != 2 or x.shape[1] != d:
        raise ShapeMismatch(f"W{W.shape} U{U.shape} b{b.shape} inputs{x.shape}")
    if reverse:
        x = x[::-1]
    xproj = (x @ W.T + b)[None, :, None, :]
    H = _scan_forward(xproj, U[None])[0][0, :, 0]
    return H[::-1].copy() if reverse else H


def bilstm_stack_forward(stack: BiLstmStack, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stack.input_size:
        raise ShapeMismatch(f"expected (T, {stack.input_size}) features, got {x.shape}")
    T = len(x)
    mask = np.ones((1, T))
    rev = _reverse_index([T], T)
    bidx = np.zeros((1, 1), dtype=np.int64)
    h = x[None]
    for layer in stack.layers:
        h, _ = _layer_forward(layer, h, mask, rev, bidx)
    return h[0]


def linear_forward(head: LinearHead, latents) -> np.ndarray:
    z = np.asarray(latents, dtype=np.float64)
    if z.shape[-1] != head.weight.shape[1]:
        raise ShapeMismatch(f"latent width {z.shape[-1]} != head input {head.weight.shape[1]}")
    return z @ head.weight.T + head.bias


def pool_mean(latents) -> np.ndarray:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise Empty("pool_mean needs a non-empty (T, width) sequence")
    return z.mean(axis=0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def sigmoid(z):
    return expit(z)


def bce_loss(logits, labels, mask=None):
    """Mean binary cross-entropy on logits and its gradient w.r.t. the logits.

    Uses ``-log sigma(z) = softplus(-z)`` so large ``|z|`` never overflows.
    Entries where ``mask`` is 0 contribute neither loss nor gradient.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise LengthMismatch(f"logits {z.shape} vs labels {y.shape}")
    m = np.ones_like(z) if mask is None else np.asarray(mask, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise LengthMismatch("no unmasked frames")
    per = -(y * log_expit(z) + (1.0 - y) * log_expit(-z))
    loss = float((per * m).sum() / n)
    grad = (expit(z) - y) * m / n
    return loss, grad


def cross_entropy_loss(logits, labels):
    """Softmax cross-entropy for one ``(K,)`` logit vector or a ``(B, K)`` batch (mean)."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels))
    B, K = z2.shape
    if K < 2:
        raise BadLabel("need at least two classes")
    if y.shape != (B,) or not np.issubdtype(y.dtype, np.integer) or np.any((y < 0) | (y >= K)):
        raise BadLabel(f"labels must be integers in [0, {K})")
    lse = logsumexp(z2, axis=1)
    loss = float(np.mean(lse - z2[np.arange(B), y]))
    grad = np.exp(z2 - lse[:, None])
    grad[np.arange(B), y] -= 1.0
    grad /= B
    return loss, (grad[0] if single else grad)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(z - logsumexp(z, axis=axis, keepdims=True))


def objective(net: BiLstmNet, x, lengths, targets):
    """Loss and parameter gradients for one batch.

    Frame nets use masked BCE on ``targets`` of shape ``(B, T)``; pooled nets
    use cross-entropy on integer ``targets`` of shape ``(B,)``.
    """
    logits, cache = net.forward(x, lengths)
    if net.pool:
        loss, dlogits = cross_entropy_loss(logits, targets)
    else:
        loss, d = bce_loss(logits[..., 0], targets, cache.mask)
        dlogits = d[..., None]
    return loss, net.backward(cache, dlogits)


# ---------------------------------------------------------------------------
# verification and optimisation
# ---------------------------------------------------------------------------

def loss_difference(net: BiLstmNet, logits_up, logits_down, targets, mask) -> float:
    """``L(up) - L(down)`` evaluated without cancelling the two large loss values.

    Per-frame terms are differenced in logit space via ``log1p``/``expm1``, so
    frames the perturbation leaves untouched contribute exactly zero.
    """
    delta = logits_up - logits_down
    if net.pool:
        p = softmax(logits_down, axis=1)
        B = len(delta)
        per = (np.log1p(np.sum(p * np.expm1(delta), axis=1))
               - delta[np.arange(B), np.asarray(targets)])
        return math.fsum(per) / B
    z_down = logits_down[..., 0]
    d = delta[..., 0]
    y = np.asarray(targets, dtype=np.float64)
    # softplus(z + d) - softplus(z) = log1p(sigma(z) * expm1(d))
    per = np.log1p(expit(z_down) * np.expm1(d)) - y * d
    return math.fsum((per * mask).ravel()) / mask.sum()


def _central_difference(net, flat, j, epsilon, x, lengths, targets) -> float:
    orig = flat[j]
    flat[j] = orig + epsilon
    up, cache = net.forward(x, lengths)
    flat[j] = orig - epsilon
    down, _ = net.forward(x, lengths)
    flat[j] = orig
    return loss_difference(net, up, down, targets, cache.mask) / (2 * epsilon)


def grad_check(net: BiLstmNet, x, lengths, targets, epsilon=1e-4, entries_per_tensor=None,
               rng=None, names=None, richardson=False) -> float:
    """Max relative error between analytic and central-difference gradients.

    The numerical derivative is ``(L(p + eps) - L(p - eps)) / (2 eps)`` with the
    difference taken by :func:`loss_difference`. ``entries_per_tensor`` caps how
    many entries of each tensor are probed (None probes all); the entry with the
    largest analytic gradient is always included.

    With ``richardson`` the estimate becomes ``(4 D(eps/2) - D(eps)) / 3``, which
    cancels the O(eps^2) truncation term of the central difference. That term
    dominates the relative error on entries whose gradient is close to zero.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(rng)
    _, grads = objective(net, x, lengths, targets)
    params = net.parameters()
    worst = 0.0
    for name in names or params:
        flat = params[name].reshape(-1)
        g = grads[name].reshape(-1)
        if entries_per_tensor is None or entries_per_tensor >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=entries_per_tensor - 1, replace=False)
            idx = np.union1d(idx, [int(np.argmax(np.abs(g)))])
        for j in idx:
            num = _central_difference(net, flat, j, epsilon, x, lengths, targets)
            if richardson:
                half = _central_difference(net, flat, j, epsilon / 2, x, lengths, targets)
                num = (4 * half - num) / 3
            err = abs(g[j] - num) / max(abs(g[j]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip_norm: float | None = 5.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(params: dict, grads: dict, state: AdamState) -> float:
    """Clip gradients to ``state.clip_norm`` globally, then update ``params`` in place.

    Returns the gradient norm before clipping.
    """
    if params.keys() != grads.keys():
        raise ShapeMismatch("params and grads name different tensors")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {grads[name].shape} vs param {p.shape}")
    norm = global_norm(grads)
    scale = 1.0
    if state.clip_norm is not None and norm > state.clip_norm:
        scale = state.clip_norm / norm
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name] * scale
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return norm
