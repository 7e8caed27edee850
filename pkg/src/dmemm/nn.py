"""Dense networks with hand-written reverse-mode gradients.

Everything in this module is plain numpy: forward passes, vector-Jacobian
products for parameters and inputs, and a bias-corrected adaptive-moment
optimizer. Keeping the arithmetic explicit makes every gradient exactly
checkable against central finite differences and keeps training runs
bitwise reproducible from a seed.

Conventions:
  * weight matrices are (n_out, n_in); a batch is a (batch, n_in) array and
    the forward pass computes X @ W.T + b layer by layer,
  * the hidden activation is applied after every layer except the last,
  * parameters are handled as the flat list [W0, b0, W1, b1, ...] so the
    optimizer and serialization never need to know the architecture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}
ACTIVATIONS = ("tanh", "relu", "gelu")

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "gelu":
        inner = _GELU_C * (z + _GELU_A * z * z * z)
        return 0.5 * z * (1.0 + np.tanh(inner))
    raise ConfigError(f"unknown activation: {name!r}")


def _activate_deriv(name: str, z: np.ndarray) -> np.ndarray:
    # Derivative with respect to the pre-activation z.
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "gelu":
        inner = _GELU_C * (z + _GELU_A * z * z * z)
        t = np.tanh(inner)
        return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * z * z)
    raise ConfigError(f"unknown activation: {name!r}")


@dataclass(eq=False)
class DenseNet:
    """Fully connected network; mutable container for weights and biases."""

    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str
    precision: str

    @property
    def dtype(self):
        return DTYPES[self.precision]

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def params(self) -> list[np.ndarray]:
        """The live parameter arrays as [W0, b0, W1, b1, ...]."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        if len(params) != 2 * len(self.weights):
            raise ShapeError(
                f"expected {2 * len(self.weights)} parameter arrays, got {len(params)}"
            )
        for i in range(len(self.weights)):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ShapeError(f"parameter shape mismatch at layer {i}")
            self.weights[i] = np.asarray(w, dtype=self.dtype)
            self.biases[i] = np.asarray(b, dtype=self.dtype)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))


def net_init(
    layer_sizes,
    activation: str = "tanh",
    precision: str = "f64",
    seed: int = 0,
) -> DenseNet:
    """Create a DenseNet with fan-in scaled Gaussian weights and zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ConfigError(f"layer_sizes needs at least input and output: {sizes}")
    if any(s <= 0 for s in sizes):
        raise ConfigError(f"layer sizes must be positive: {sizes}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation: {activation!r}")
    if precision not in DTYPES:
        raise ConfigError(f"unknown precision: {precision!r}")
    rng = np.random.default_rng(seed)
    dtype = DTYPES[precision]
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
    return DenseNet(sizes, weights, biases, activation, precision)


def clone_net(net: DenseNet) -> DenseNet:
    return DenseNet(
        net.layer_sizes,
        [w.copy() for w in net.weights],
        [b.copy() for b in net.biases],
        net.activation,
        net.precision,
    )


def _as_batch(net: DenseNet, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=net.dtype)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != net.in_dim:
        raise ShapeError(f"input shape {np.shape(x)} does not match in_dim {net.in_dim}")
    return arr, single


def _forward_cached(net: DenseNet, x2d: np.ndarray):
    acts = [x2d]
    pres = []
    a = x2d
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        pres.append(z)
        a = _activate(net.activation, z) if i < last else z
        acts.append(a)
    return acts, pres


def net_forward(net: DenseNet, x) -> np.ndarray:
    """Evaluate the net on a single input (d,) or a batch (B, d)."""
    x2d, single = _as_batch(net, x)
    out = _forward_cached(net, x2d)[0][-1]
    return out[0] if single else out


def net_grad_batch(net: DenseNet, x, upstream, need_param_grads: bool = True):
    """Batched vector-Jacobian product.

    Args:
      x: (B, in_dim) inputs.
      upstream: (B, out_dim) cotangent of the outputs.
      need_param_grads: skip parameter gradients when only input gradients
        are wanted (saves the two big matmuls per layer).

    Returns:
      (param_grads, input_grads) where param_grads is [dW0, db0, ...] summed
      over the batch (or None), and input_grads is (B, in_dim).
    """
    x2d, _ = _as_batch(net, x)
    u = np.asarray(upstream, dtype=net.dtype)
    if u.ndim == 1:
        u = u[None, :]
    if u.shape != (x2d.shape[0], net.out_dim):
        raise ShapeError(
            f"upstream shape {np.shape(upstream)} does not match ({x2d.shape[0]}, {net.out_dim})"
        )
    acts, pres = _forward_cached(net, x2d)
    n_layers = len(net.weights)
    param_grads: list[np.ndarray] | None = None
    if need_param_grads:
        param_grads = [np.zeros_like(p) for p in net.params()]
    delta = u
    for i in range(n_layers - 1, -1, -1):
        if need_param_grads:
            param_grads[2 * i] = delta.T @ acts[i]
            param_grads[2 * i + 1] = delta.sum(axis=0)
        back = delta @ net.weights[i]
        if i > 0:
            delta = back * _activate_deriv(net.activation, pres[i - 1])
    return param_grads, back


def net_grad(net: DenseNet, x, upstream):
    """Single-input VJP; returns ([dW0, db0, ...], dx)."""
    grads, dx = net_grad_batch(net, np.asarray(x)[None, :], np.asarray(upstream)[None, :])
    return grads, dx[0]


def flatten_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten_arrays(vec: np.ndarray, like: list[np.ndarray]) -> list[np.ndarray]:
    total = sum(a.size for a in like)
    if vec.size != total:
        raise ShapeError(f"flat vector of size {vec.size} does not match {total} parameters")
    out, ofs = [], 0
    for a in like:
        out.append(np.asarray(vec[ofs : ofs + a.size], dtype=a.dtype).reshape(a.shape))
        ofs += a.size
    return out


@dataclass(eq=False)
class OptState:
    """Adaptive-moment optimizer state (first/second moments plus step count)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def opt_state_init(params: list[np.ndarray], lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> OptState:
    if not np.isfinite(lr) or lr <= 0:
        raise ConfigError(f"learning rate must be positive and finite: {lr}")
    return OptState(
        lr=float(lr), beta1=float(beta1), beta2=float(beta2), eps=float(eps),
        step=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def opt_step(params: list[np.ndarray], grads: list[np.ndarray], state: OptState):
    """One optimizer update; returns (new_params, new_state) without mutating inputs."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must have matching lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * (g * g)
        step = state.lr * (m2 / c1) / (np.sqrt(v2 / c2) + state.eps)
        new_params.append(p - step)
        new_m.append(m2)
        new_v.append(v2)
    new_state = OptState(lr=state.lr, beta1=b1, beta2=b2, eps=state.eps,
                         step=t, m=new_m, v=new_v)
    return new_params, new_state


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {name}")
