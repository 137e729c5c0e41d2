"""Reverse-mode automatic differentiation on an explicit tape.

Every differentiable objective in this package (negative ELBO, log
densities) is recorded on a :class:`Tape` as a DAG of primitive
operations over float64 arrays.  A backward sweep seeded with adjoint 1
at a scalar output node fills in adjoints for every node, so gradients
with respect to any set of leaf (parameter) nodes fall out in one pass.

The primitive set is deliberately small: exactly what the flow models
and targets below need.  Values are numpy float64 arrays throughout;
batches are stored with samples along the first axis, so one node
usually carries an entire minibatch.

Accumulation is strictly sequential in reverse node order, which makes
gradients deterministic: the same tape with the same values produces
bitwise-identical adjoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class Tape:
    """Recorded computation: nodes in topological order, one output.

    A tape is single-writer: build the graph, call :meth:`gradient`
    once on a scalar node, read adjoints.  Independent tapes can be
    evaluated concurrently.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, value, parents, vjps) -> "Node":
        node = Node(self, len(self.nodes), np.asarray(value, dtype=np.float64),
                    parents, vjps)
        self.nodes.append(node)
        return node

    def leaf(self, value) -> "Node":
        """Register an input node (parameter or data)."""
        return self._record(value, (), ())

    def constant(self, value) -> "Node":
        """Like leaf, but conventionally not differentiated against."""
        return self._record(value, (), ())

    def gradient(self, output: "Node", leaves: list["Node"]) -> list[np.ndarray]:
        """Backward pass from a scalar output; returns one array per leaf."""
        if output.value.size != 1:
            raise ValueError(
                f"backward pass needs a scalar output, got shape {output.value.shape}")
        adjoints: list[np.ndarray | None] = [None] * len(self.nodes)
        adjoints[output.idx] = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.idx + 1]):
            grad = adjoints[node.idx]
            if grad is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contribution = vjp(grad)
                if adjoints[parent.idx] is None:
                    adjoints[parent.idx] = contribution
                else:
                    adjoints[parent.idx] = adjoints[parent.idx] + contribution
        out = []
        for leaf in leaves:
            g = adjoints[leaf.idx]
            out.append(np.zeros_like(leaf.value) if g is None else g)
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Node:
    __slots__ = ("tape", "idx", "value", "parents", "vjps")

    def __init__(self, tape, idx, value, parents, vjps):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.constant(other)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        return self.tape._record(
            self.value + other.value, (self, other),
            (lambda g, s=self.value.shape: _unbroadcast(g, s),
             lambda g, s=other.value.shape: _unbroadcast(g, s)))

    __radd__ = __add__

    def __neg__(self):
        return self.tape._record(-self.value, (self,), (lambda g: -g,))

    def __sub__(self, other):
        other = self._lift(other)
        return self.tape._record(
            self.value - other.value, (self, other),
            (lambda g, s=self.value.shape: _unbroadcast(g, s),
             lambda g, s=other.value.shape: _unbroadcast(-g, s)))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        return self.tape._record(
            self.value * other.value, (self, other),
            (lambda g, o=other.value, s=self.value.shape: _unbroadcast(g * o, s),
             lambda g, o=self.value, s=other.value.shape: _unbroadcast(g * o, s)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        return self.tape._record(
            self.value / other.value, (self, other),
            (lambda g, o=other.value, s=self.value.shape:
                 _unbroadcast(g / o, s),
             lambda g, a=self.value, o=other.value, s=other.value.shape:
                 _unbroadcast(-g * a / (o * o), s)))

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise TypeError("only scalar constant exponents are supported")
        return self.tape._record(
            self.value ** exponent, (self,),
            (lambda g, x=self.value, p=exponent: g * p * x ** (p - 1),))

    # -- shape ops ------------------------------------------------------

    def __getitem__(self, key):
        value = self.value[key]

        def vjp(g, key=key, shape=self.value.shape):
            out = np.zeros(shape)
            out[key] = g
            return out

        return self.tape._record(value, (self,), (vjp,))

    def reshape(self, *shape):
        return self.tape._record(
            self.value.reshape(*shape), (self,),
            (lambda g, s=self.value.shape: g.reshape(s),))

    def transpose(self, axes=None):
        inverse = None if axes is None else np.argsort(axes)
        return self.tape._record(
            np.transpose(self.value, axes), (self,),
            (lambda g, a=inverse: np.transpose(g, a),))

    def sum(self, axis=None):
        return self.tape._record(
            np.sum(self.value, axis=axis), (self,),
            (lambda g, s=self.value.shape, a=axis:
                 np.broadcast_to(np.expand_dims(g, a) if a is not None else g,
                                 s).copy(),))

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) / float(n)


# -- elementwise primitives --------------------------------------------

def _unary(x: Node, value, deriv) -> Node:
    return x.tape._record(value, (x,), (lambda g: g * deriv,))


def exp(x: Node) -> Node:
    v = np.exp(x.value)
    return _unary(x, v, v)


def log(x: Node) -> Node:
    return _unary(x, np.log(x.value), 1.0 / x.value)


def sqrt(x: Node) -> Node:
    v = np.sqrt(x.value)
    return _unary(x, v, 0.5 / v)


def tanh(x: Node) -> Node:
    v = np.tanh(x.value)
    return _unary(x, v, 1.0 - v * v)


def sinh(x: Node) -> Node:
    return _unary(x, np.sinh(x.value), np.cosh(x.value))


def cosh(x: Node) -> Node:
    return _unary(x, np.cosh(x.value), np.sinh(x.value))


def asinh(x: Node) -> Node:
    return _unary(x, np.arcsinh(x.value), 1.0 / np.sqrt(1.0 + x.value ** 2))


def softplus(x: Node) -> Node:
    return _unary(x, softplus_np(x.value), _sigmoid_np(x.value))


def leaky_relu(x: Node, negative_slope: float = 0.01) -> Node:
    scale = np.where(x.value >= 0.0, 1.0, negative_slope)
    return _unary(x, x.value * scale, scale)


def softplus_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def matmul(a: Node, b: Node) -> Node:
    """Matrix product, supporting stacked (batched) operands."""
    value = a.value @ b.value

    def vjp_a(g, bv=b.value, sa=a.value.shape):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), sa)

    def vjp_b(g, av=a.value, sb=b.value.shape):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, sb)

    return a.tape._record(value, (a, b), (vjp_a, vjp_b))


def concat(nodes: list[Node], axis: int = -1) -> Node:
    tape = nodes[0].tape
    value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)
    vjps = []
    for i, n in enumerate(nodes):
        def vjp(g, lo=offsets[i], hi=offsets[i + 1], a=axis):
            index = [slice(None)] * g.ndim
            index[a] = slice(lo, hi)
            return g[tuple(index)]
        vjps.append(vjp)
    return tape._record(value, tuple(nodes), tuple(vjps))


def gaussian_quadform_logdet(sigma: Node, scatter: np.ndarray, n_obs: int) -> Node:
    """Per-matrix value of -n/2 log|S| - 1/2 tr(S^-1 A) for a batch of SPD S.

    ``scatter`` is the constant sum of outer products of the observations.
    The closed-form derivative with respect to S is
    -n/2 S^-1 + 1/2 S^-1 A S^-1, which keeps 6x6 linear algebra out of
    the elementary primitive set.
    """
    sigma_v = sigma.value
    inv = np.linalg.inv(sigma_v)
    sign, logdet = np.linalg.slogdet(sigma_v)
    if np.any(sign <= 0):
        raise FloatingPointError("covariance matrix is not positive definite")
    quad = np.einsum("...ij,ji->...", inv, scatter)
    value = -0.5 * n_obs * logdet - 0.5 * quad

    def vjp(g):
        inner = inv @ scatter @ inv
        grad = -0.5 * n_obs * inv + 0.5 * inner
        # symmetrize: value depends only on the symmetric part of S
        grad = 0.5 * (grad + np.swapaxes(grad, -1, -2))
        return np.expand_dims(np.expand_dims(np.asarray(g), -1), -1) * grad

    return sigma.tape._record(value, (sigma,), (vjp,))


# -- multi-layer perceptron --------------------------------------------

@dataclass
class MlpParams:
    """Weights and biases of a fully connected net with leaky-ReLU hidden units.

    Layer shapes chain: weights[i] has shape (fan_out, fan_in) with
    fan_in of layer i+1 equal to fan_out of layer i.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    negative_slope: float = 0.01

    @classmethod
    def create(cls, sizes: list[int], scale: float = 0.0, rng=None,
               negative_slope: float = 0.01) -> "MlpParams":
        """Hidden layers He-initialized, final layer scale * N(0, 1).

        The default scale of 0 zeroes the final layer so the net is the
        zero map at creation; hidden layers must still be random, since
        an all-zero net is a saddle point where only the output bias
        receives gradient.
        """
        if rng is None:
            rng = np.random.default_rng(0xA11CE)
        weights, biases = [], []
        last = len(sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if i == last:
                if scale == 0.0:
                    w = np.zeros((fan_out, fan_in))
                else:
                    w = scale * rng.standard_normal((fan_out, fan_in))
            else:
                w = np.sqrt(2.0 / fan_in) * rng.standard_normal(
                    (fan_out, fan_in))
            weights.append(w)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, negative_slope)

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def set_params(self, arrays: list[np.ndarray]) -> None:
        it = iter(arrays)
        for i in range(len(self.weights)):
            self.weights[i] = next(it)
            self.biases[i] = next(it)

    def lift(self, tape: Tape) -> list[Node]:
        return [tape.leaf(a) for a in self.params()]

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        """Plain numpy forward pass; x has samples along the first axis."""
        h = np.asarray(x, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < last:
                h = np.where(h >= 0.0, h, self.negative_slope * h)
        return h


def mlp_apply(params: MlpParams, x: Node, tape: Tape,
              leaves: list[Node] | None = None) -> Node:
    """Forward pass recorded on the tape.

    ``leaves`` are the lifted parameter nodes (from ``params.lift``);
    when omitted the parameters are lifted here, which is fine for
    evaluation but leaves the caller without handles for gradients.
    """
    if x.value.shape[-1] != params.weights[0].shape[1]:
        raise ValueError(
            f"input dim {x.value.shape[-1]} != first-layer fan-in "
            f"{params.weights[0].shape[1]}")
    if leaves is None:
        leaves = params.lift(tape)
    h = x
    last = len(params.weights) - 1
    for i in range(len(params.weights)):
        w, b = leaves[2 * i], leaves[2 * i + 1]
        h = matmul(h, w.transpose()) + b
        if i < last:
            h = leaky_relu(h, params.negative_slope)
    return h


# -- finite differences (independent oracle) ----------------------------

def finite_difference(fn, arrays: list[np.ndarray], h: float = 1e-5):
    """Central finite differences of a scalar function of numpy arrays.

    Step is scaled by max(1, |x|) per entry.  Used as the independent
    oracle for reverse-mode gradients; never calls the tape.
    """
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            step = h * max(1.0, abs(flat[j]))
            orig = flat[j]
            flat[j] = orig + step
            fp = fn(arrays)
            flat[j] = orig - step
            fm = fn(arrays)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads
