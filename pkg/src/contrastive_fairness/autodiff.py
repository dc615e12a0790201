"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations on :class:`Tensor` values are recorded on the innermost active
:class:`Tape`. Every backward rule is itself written in terms of tensor
operations, so calling :meth:`Tape.gradient` with ``create_graph=True`` records
the adjoint computation on the same tape and it can be differentiated again.
That is all the second-order machinery the gradient penalty needs.

    with Tape() as tape:
        w = Tensor(w0, requires_grad=True)
        loss = (w * w).sum()
        (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, NumericalFailure

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class _Paused:
    """Context that suspends recording (pushes a ``None`` tape)."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()


no_record = _Paused


class Tensor:
    __slots__ = ("value", "requires_grad", "node")
    # Makes ``ndarray <op> Tensor`` defer to the Tensor's reflected operator.
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        tag = f", op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


@dataclass(eq=False)
class Node:
    index: int
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable = field(repr=False)


class Tape:
    """Append-only record of primitive operations.

    Nodes only reference tensors produced by earlier nodes (or leaves), so the
    recording order is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()

    def _record(self, op, out, inputs, backward):
        node = Node(len(self.nodes), op, inputs, out, backward)
        self.nodes.append(node)
        out.node = node
        out.requires_grad = True

    def gradient(self, output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
        """Adjoints of scalar ``output`` with respect to each of ``inputs``.

        With ``create_graph`` the backward pass is recorded on this tape, so
        the returned tensors can themselves be differentiated.
        """
        if output.value.size != 1:
            raise ContractViolation(f"gradient needs a scalar output, got shape {output.shape}")
        if not np.isfinite(output.value).all():
            raise NumericalFailure(f"non-finite output value {output.value}")
        zeros = [Tensor(np.zeros_like(t.value)) for t in inputs]
        node = output.node
        if node is None or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
            return zeros

        nodes = self.nodes[: node.index + 1]
        wanted = {id(t) for t in inputs}
        relevant = set(wanted)
        for nd in nodes:
            if any(id(t) in relevant for t in nd.inputs):
                relevant.add(id(nd.output))
        if id(output) not in relevant:
            return zeros

        adjoints = {id(output): Tensor(np.ones_like(output.value))}
        ctx = self if create_graph else _Paused()
        with ctx:
            for nd in reversed(nodes):
                key = id(nd.output)
                g = adjoints.get(key) if key in wanted else adjoints.pop(key, None)
                if g is None:
                    continue
                grads = nd.backward(g)
                for t, gt in zip(nd.inputs, grads):
                    if gt is None or id(t) not in relevant:
                        continue
                    if not np.isfinite(gt.value).all():
                        raise NumericalFailure(f"non-finite adjoint flowing out of node {nd.index} ({nd.op})")
                    prev = adjoints.get(id(t))
                    adjoints[id(t)] = gt if prev is None else prev + gt
        return [adjoints.get(id(t), z) for t, z in zip(inputs, zeros)]


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, value, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if not np.isfinite(out.value).all():
            raise NumericalFailure(f"non-finite value produced by node {len(tape.nodes)} ({op})")
        tape._record(op, out, inputs, backward)
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    if axes:
        g = tsum(g, axes, keepdims=True)
    return reshape(g, shape)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make("mul", a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def backward(g):
        ga = g / b
        return _unbroadcast(ga, a.shape), _unbroadcast(-(ga * a) / b, b.shape)

    return _make("div", a.value / b.value, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make("neg", -a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    if p == 2:
        return _make("square", a.value * a.value, (a,), lambda g: (g * a * 2.0,))
    return _make(f"pow{p}", a.value ** p, (a,), lambda g: (g * (power(a, p - 1) * p),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = _make("exp", np.exp(a.value), (a,), lambda g: (g * out,))
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        value = np.log(a.value)
    return _make("log", value, (a,), lambda g: (g / a,))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = _make("sqrt", np.sqrt(a.value), (a,), lambda g: ((g / out) * 0.5,))
    return out


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = _make("tanh", np.tanh(a.value), (a,), lambda g: (g * (1.0 - out * out),))
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _make("sigmoid", expit(a.value), (a,), lambda g: (g * (out * (1.0 - out)),))
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = _wrap(a)
    return _make("softplus", np.logaddexp(0.0, a.value), (a,), lambda g: (g * sigmoid(a),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = (a.value > 0).astype(np.float64)  # subgradient 0 at the kink
    return _make("relu", a.value * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _wrap(a)
    factor = np.where(a.value > 0, 1.0, slope)
    return _make("leaky_relu", a.value * factor, (a,), lambda g: (g * factor,))


def absolute(a) -> Tensor:
    a = _wrap(a)
    sign = np.sign(a.value)
    return _make("abs", np.abs(a.value), (a,), lambda g: (g * sign,))


def safe_reciprocal(a) -> Tensor:
    """1/a elementwise, with 0 wherever a == 0."""
    a = _wrap(a)
    nz = a.value != 0
    value = np.divide(1.0, a.value, out=np.zeros_like(a.value), where=nz)
    out = _make("safe_reciprocal", value, (a,), lambda g: (-(g * out * out),))
    return out


# -- shape and reduction -----------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    kept = np.sum(a.value, axis=axis, keepdims=True).shape

    def backward(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _make("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.value.size / max(np.sum(a.value, axis=axis, keepdims=True).size, 1)
    return tsum(a, axis, keepdims) * (1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    return _make("broadcast", np.broadcast_to(a.value, shape), (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _make("reshape", a.value.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.value, axes), (a,), lambda g: (transpose(g, inverse),))


def swap_last(a) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    a = _wrap(a)
    return _make("slice", a.value[idx], (a,), lambda g: (scatter(g, idx, a.shape),))


def scatter(g, idx, shape) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``idx``; adjoint of slicing."""
    g = _wrap(g)
    value = np.zeros(shape)
    np.add.at(value, idx, g.value)
    return _make("scatter", value, (g,), lambda gg: (getitem(gg, idx),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = (slice(None),) * axis + (slice(int(lo), int(hi)),)
            out.append(getitem(g, idx))
        return tuple(out)

    return _make("concat", np.concatenate([t.value for t in tensors], axis=axis), tensors, backward)


def pad_last(a, before: int, after: int) -> Tensor:
    """Zero-pad the last axis."""
    a = _wrap(a)
    if before == 0 and after == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 1) + [(before, after)]
    n = a.shape[-1]
    idx = (Ellipsis, slice(before, before + n))
    return _make("pad", np.pad(a.value, widths), (a,), lambda g: (getitem(g, idx),))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul operands must be at least 2-D")

    def backward(g):
        return (_unbroadcast(matmul(g, swap_last(b)), a.shape),
                _unbroadcast(matmul(swap_last(a), g), b.shape))

    return _make("matmul", np.matmul(a.value, b.value), (a, b), backward)


def _window_index(length_out: int, kernel: int, stride: int) -> np.ndarray:
    return np.arange(kernel)[:, None] + stride * np.arange(length_out)[None, :]


def unfold1d(x, kernel: int, stride: int = 1) -> Tensor:
    """(N, C, L) -> (N, C*kernel, L_out) sliding windows (im2col)."""
    x = _wrap(x)
    n, c, length = x.shape
    l_out = (length - kernel) // stride + 1
    if l_out < 1:
        raise ContractViolation(f"kernel {kernel} longer than input length {length}")
    cols = x.value[:, :, _window_index(l_out, kernel, stride)].reshape(n, c * kernel, l_out)
    return _make("unfold1d", cols, (x,), lambda g: (fold1d(g, c, length, kernel, stride),))


def fold1d(cols, channels: int, length: int, kernel: int, stride: int = 1) -> Tensor:
    """Adjoint of :func:`unfold1d`: overlapping windows are summed back."""
    cols = _wrap(cols)
    n, _, l_out = cols.shape
    blocks = cols.value.reshape(n, channels, kernel, l_out)
    out = np.zeros((n, channels, length))
    for j in range(kernel):
        out[:, :, j: j + stride * (l_out - 1) + 1: stride] += blocks[:, :, j, :]
    return _make("fold1d", out, (cols,), lambda g: (unfold1d(g, kernel, stride),))


def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation. x: (N, C_in, L); w: (C_out, C_in, K)."""
    x, w = _wrap(x), _wrap(w)
    c_out, c_in, k = w.shape
    cols = unfold1d(pad_last(x, padding, padding), k, stride)
    n, _, l_out = cols.shape
    # one (C_out, C_in*K) x (C_in*K, N*L) product rather than N batched ones
    flat = reshape(transpose(cols, (1, 0, 2)), (c_in * k, n * l_out))
    y = transpose(reshape(matmul(reshape(w, (c_out, c_in * k)), flat), (c_out, n, l_out)), (1, 0, 2))
    if b is not None:
        y = y + reshape(_wrap(b), (1, c_out, 1))
    return y


def conv_transpose1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution. x: (N, C_in, L); w: (C_in, C_out, K)."""
    x, w = _wrap(x), _wrap(w)
    c_in, c_out, k = w.shape
    length = x.shape[-1]
    full = (length - 1) * stride + k
    n = x.shape[0]
    flat = reshape(transpose(x, (1, 0, 2)), (c_in, n * length))
    cols = matmul(transpose(reshape(w, (c_in, c_out * k)), (1, 0)), flat)
    cols = transpose(reshape(cols, (c_out * k, n, length)), (1, 0, 2))
    y = fold1d(cols, c_out, full, k, stride)
    if padding:
        y = getitem(y, (Ellipsis, slice(padding, full - padding)))
    if b is not None:
        y = y + reshape(_wrap(b), (1, c_out, 1))
    return y


def instance_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) row over the last axis."""
    x = _wrap(x)
    centred = x - mean(x, axis=-1, keepdims=True)
    var = mean(centred * centred, axis=-1, keepdims=True)
    y = centred / sqrt(var + eps)
    if gamma is not None:
        y = y * reshape(_wrap(gamma), (1, -1, 1))
    if beta is not None:
        y = y + reshape(_wrap(beta), (1, -1, 1))
    return y


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; its subgradient at the origin is taken to be 0."""
    a = _wrap(a)
    kept_value = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=True))
    kept_shape = kept_value.shape

    def backward(g):
        g = reshape(g, kept_shape)
        norm = reshape(out, kept_shape)
        return (a * (g * safe_reciprocal(norm)),)

    value = kept_value if keepdims else kept_value.reshape(np.sum(a.value, axis=axis).shape)
    out = _make("l2_norm", value, (a,), backward)
    return out


def l1_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    return tsum(absolute(a), axis, keepdims)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    kept_value = m + np.log(np.sum(np.exp(a.value - m), axis=axis, keepdims=True))
    kept_shape = kept_value.shape

    def backward(g):
        k = reshape(out, kept_shape)
        return (reshape(g, kept_shape) * exp(a - k),)

    value = kept_value if keepdims else kept_value.reshape(np.sum(a.value, axis=axis).shape)
    out = _make("logsumexp", value, (a,), backward)
    return out


# -- convenience -------------------------------------------------------------


def value_and_grad(f: Callable, *arrays) -> tuple[float, list[np.ndarray]]:
    """Evaluate scalar ``f`` on fresh leaves built from ``arrays`` and differentiate."""
    with Tape() as tape:
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        out = f(*leaves)
        grads = tape.gradient(out, leaves)
    return float(out.value), [g.value for g in grads]


def grad(f: Callable, *arrays) -> list[np.ndarray]:
    return value_and_grad(f, *arrays)[1]


def penalty_term(tape: Tape, critic: Callable, params: Mapping[str, Tensor], x_hat) -> Tensor:
    """Mean of (||d critic / d x_hat||_2 - 1)^2 over the rows of ``x_hat``.

    ``critic(params, x)`` must return one score per row with no interaction
    between rows, so the gradient of the summed scores splits per row. The
    input gradient is recorded on ``tape`` and stays differentiable in
    ``params``.
    """
    x_hat = Tensor(np.atleast_2d(_wrap(x_hat).value), requires_grad=True)
    scores = critic(params, x_hat)
    (gx,) = tape.gradient(tsum(scores), [x_hat], create_graph=True)
    norms = l2_norm(reshape(gx, (gx.shape[0], -1)), axis=1)
    dev = norms - 1.0
    return mean(dev * dev)


def grad_penalty(critic: Callable, params: Mapping[str, np.ndarray], x_hat) -> tuple[float, dict[str, np.ndarray]]:
    """Gradient penalty and its gradient with respect to the critic parameters.

    Computed by double backpropagation. Where the input gradient vanishes the
    penalty is exactly 1 and the norm contributes a zero subgradient.
    """
    with Tape() as tape:
        leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
        pen = penalty_term(tape, critic, leaves, x_hat)
        names = list(leaves)
        grads = tape.gradient(pen, [leaves[k] for k in names])
    return float(pen.value), {k: g.value for k, g in zip(names, grads)}


# -- optimiser ---------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments keyed like the parameter dict they track."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.5,
              beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
        return cls(m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()},
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractViolation("parameter, gradient and optimizer keys differ")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractViolation(f"shape mismatch for {k!r}: param {p.shape}, grad {g.shape}, "
                                    f"moment {state.m[k].shape}")
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return new_params, new_state
