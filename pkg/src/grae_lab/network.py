"""Dense MLPs with hand-written reverse- and forward-mode derivatives.

Every routine accepts either a single input vector of shape ``(d,)`` or a
batch of shape ``(n, d)``. Parameter gradients of a batched call are summed
over the batch.

Layer ``l`` computes ``a_l = act(W_l a_{l-1} + b_l)`` with ``W_l`` stored as
``(out, in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

LEAKY_SLOPE = 0.2


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _elu(u):
    return np.where(u > 0, u, np.expm1(np.minimum(u, 0.0)))


def _elu_d1(u):
    return np.where(u > 0, 1.0, np.exp(np.minimum(u, 0.0)))


def _elu_d2(u):
    return np.where(u > 0, 0.0, np.exp(np.minimum(u, 0.0)))


def _tanh_d1(u):
    t = np.tanh(u)
    return 1.0 - t * t


def _tanh_d2(u):
    t = np.tanh(u)
    return -2.0 * t * (1.0 - t * t)


def _sigmoid_d1(u):
    s = _sigmoid(u)
    return s * (1.0 - s)


def _sigmoid_d2(u):
    s = _sigmoid(u)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


# name -> (value, first derivative, second derivative)
ACTIVATIONS = {
    "identity": (lambda u: u, np.ones_like, np.zeros_like),
    "tanh": (np.tanh, _tanh_d1, _tanh_d2),
    "sigmoid": (_sigmoid, _sigmoid_d1, _sigmoid_d2),
    "elu": (_elu, _elu_d1, _elu_d2),
    "relu": (lambda u: np.maximum(u, 0.0), lambda u: (u > 0).astype(float), np.zeros_like),
    "leaky_relu": (
        lambda u: np.where(u > 0, u, LEAKY_SLOPE * u),
        lambda u: np.where(u > 0, 1.0, LEAKY_SLOPE),
        np.zeros_like,
    ),
}

KINKED = {"relu", "leaky_relu"}


def activation(name):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        activation(self.activation)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionMismatch("layer weight/bias shapes disagree")


@dataclass
class MlpNetwork:
    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise DimensionMismatch("adjacent layer dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def copy(self) -> "MlpNetwork":
        return MlpNetwork([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def __call__(self, z):
        return forward(self, z)[0]


@dataclass
class ParamGradients:
    dW: list[np.ndarray]
    db: list[np.ndarray]

    def as_list(self) -> list[np.ndarray]:
        out = []
        for gw, gb in zip(self.dW, self.db):
            out += [gw, gb]
        return out

    def __add__(self, other: "ParamGradients") -> "ParamGradients":
        return ParamGradients(
            [a + b for a, b in zip(self.dW, other.dW)],
            [a + b for a, b in zip(self.db, other.db)],
        )


@dataclass
class ForwardTrace:
    inputs: list[np.ndarray] = field(default_factory=list)  # a_{l-1}, batched
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    single: bool = False


@dataclass
class JvpTrace:
    forward: ForwardTrace
    tangents_in: list[np.ndarray]  # t_{l-1}
    tangents_pre: list[np.ndarray]  # W_l t_{l-1}
    tangent_out: np.ndarray


def init_mlp(sizes, activations, rng) -> MlpNetwork:
    """Glorot-uniform weights, zero biases.

    ``sizes`` lists layer widths including input and output; ``activations``
    has one entry per layer (or a single name applied to all).
    """
    if isinstance(activations, str):
        activations = [activations] * (len(sizes) - 1)
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append(Layer(rng.uniform(-lim, lim, size=(fan_out, fan_in)), np.zeros(fan_out), act))
    return MlpNetwork(layers)


def _batch(net: MlpNetwork, z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = z[None, :] if single else z
    if Z.ndim != 2 or Z.shape[1] != net.in_dim:
        raise DimensionMismatch(f"input shape {z.shape} does not match in_dim {net.in_dim}")
    return Z, single


def forward(net: MlpNetwork, z):
    Z, single = _batch(net, z)
    trace = ForwardTrace(single=single)
    a = Z
    for layer in net.layers:
        f = activation(layer.activation)[0]
        u = a @ layer.W.T + layer.b
        trace.inputs.append(a)
        trace.pre.append(u)
        a = f(u)
        trace.post.append(a)
    return (a[0] if single else a), trace


def _upstream(net, trace, upstream):
    U = np.asarray(upstream, dtype=float)
    if trace.single and U.ndim == 1:
        U = U[None, :]
    if U.shape != trace.post[-1].shape:
        raise DimensionMismatch(f"upstream shape {np.shape(upstream)} != output shape")
    return U


def backward(net: MlpNetwork, trace: ForwardTrace, upstream):
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input."""
    g = _upstream(net, trace, upstream)
    dW, db = [None] * len(net.layers), [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        d1 = activation(layer.activation)[1]
        gu = g * d1(trace.pre[i])
        dW[i] = gu.T @ trace.inputs[i]
        db[i] = gu.sum(axis=0)
        g = gu @ layer.W
    return ParamGradients(dW, db), (g[0] if trace.single else g)


def input_jacobian(net: MlpNetwork, z):
    """Decoder Jacobian, ``(D, d)`` for one point or ``(n, D, d)`` for a batch."""
    Z, single = _batch(net, z)
    _, trace = forward(net, Z)
    J = np.broadcast_to(np.eye(net.in_dim), (Z.shape[0], net.in_dim, net.in_dim))
    for i, layer in enumerate(net.layers):
        d1 = activation(layer.activation)[1]
        J = d1(trace.pre[i])[:, :, None] * np.einsum("oi,nij->noj", layer.W, J)
    return J[0] if single else J


def jvp(net: MlpNetwork, z, t):
    """Tangent propagation: returns ``(J_g(z) t, trace)``."""
    Z, single = _batch(net, z)
    T = np.asarray(t, dtype=float)
    T = T[None, :] if T.ndim == 1 else T
    if T.shape[1] != net.in_dim:
        raise DimensionMismatch("tangent dimension does not match in_dim")
    T = np.broadcast_to(T, Z.shape)
    ftrace = ForwardTrace(single=single)
    t_in, t_pre = [], []
    a, tan = Z, T
    for layer in net.layers:
        f, d1, _ = activation(layer.activation)
        u = a @ layer.W.T + layer.b
        s = tan @ layer.W.T
        ftrace.inputs.append(a)
        ftrace.pre.append(u)
        t_in.append(tan)
        t_pre.append(s)
        a = f(u)
        tan = d1(u) * s
        ftrace.post.append(a)
    jt = JvpTrace(ftrace, t_in, t_pre, tan)
    return (tan[0] if single else tan), jt


def jvp_backward(net: MlpNetwork, jtrace: JvpTrace, up_value=None, up_tangent=None):
    """Reverse pass through the augmented (value, tangent) computation.

    Returns gradients of ``sum(up_value * g(z)) + sum(up_tangent * J t)``
    with respect to the parameters and to ``z``.
    """
    ft = jtrace.forward
    shape = ft.post[-1].shape
    ga = np.zeros(shape) if up_value is None else _upstream(net, ft, up_value).copy()
    gt = np.zeros(shape) if up_tangent is None else _upstream(net, ft, up_tangent).copy()
    dW, db = [None] * len(net.layers), [None] * len(net.layers)
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        _, d1, d2 = activation(layer.activation)
        u, s = ft.pre[i], jtrace.tangents_pre[i]
        d1u = d1(u)
        gs = d1u * gt
        gu = d1u * ga + d2(u) * s * gt
        dW[i] = gu.T @ ft.inputs[i] + gs.T @ jtrace.tangents_in[i]
        db[i] = gu.sum(axis=0)
        ga = gu @ layer.W
        gt = gs @ layer.W
    return ParamGradients(dW, db), (ga[0] if ft.single else ga)


def grad_jvp_sqnorm(net: MlpNetwork, z, t):
    """Gradient of ``||J_g(z) t||^2`` w.r.t. parameters and ``z``."""
    tan, jt = jvp(net, z, t)
    return jvp_backward(net, jt, up_tangent=2.0 * tan)


def net_to_doc(net: MlpNetwork) -> list[dict]:
    return [{"w": l.W.tolist(), "b": l.b.tolist(), "activation": l.activation} for l in net.layers]


def net_from_doc(doc) -> MlpNetwork:
    return MlpNetwork([
        Layer(np.array(d["w"], dtype=float).reshape(len(d["b"]), -1), np.array(d["b"], dtype=float), d["activation"])
        for d in doc
    ])
