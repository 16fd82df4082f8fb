"""Dense layers with hand-written backward passes, Adam, and gradient checking.

Arrays are 2-D numpy arrays with one sample per row. Layers keep their
trainable tensors in ``params`` and write matching gradients into ``grads``
on every ``backward`` call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateBatchError, LabelError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
L2_FLOOR = 1e-12


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.cache = None

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state that must be persisted with the layer."""
        return {}

    def __repr__(self):
        shapes = ", ".join(f"{k}={v.shape}" for k, v in self.params.items())
        return f"{type(self).__name__}({shapes})"


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_dim)
        self.params["weight"] = rng.uniform(-bound, bound, size=(in_dim, out_dim))
        self.params["bias"] = np.zeros((1, out_dim))

    @property
    def in_dim(self):
        return self.params["weight"].shape[0]

    @property
    def out_dim(self):
        return self.params["weight"].shape[1]

    def forward(self, x, train=False, rng=None):
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
        if x.shape[0] < 1:
            raise ShapeError(f"linear: empty batch {x.shape}")
        self.cache = x
        return x @ w + self.params["bias"]

    def backward(self, dy):
        x = self.cache
        self.grads["weight"] = x.T @ dy
        self.grads["bias"] = dy.sum(axis=0, keepdims=True)
        return dy @ self.params["weight"].T


class BatchNorm(Layer):
    """Batch normalization over rows.

    Train mode normalizes with batch statistics and updates the running
    averages; infer mode (or ``frozen``) uses the running statistics.
    """

    kind = "batchnorm"

    def __init__(self, dim: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        super().__init__()
        if eps <= 0:
            raise ContractError("batchnorm epsilon must be positive")
        self.momentum = momentum
        self.eps = eps
        self.params["gain"] = np.ones((1, dim))
        self.params["shift"] = np.zeros((1, dim))
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.frozen = False

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False, rng=None):
        gain, shift = self.params["gain"], self.params["shift"]
        if x.ndim != 2 or x.shape[1] != gain.shape[1]:
            raise ShapeError(f"batchnorm: input shape {x.shape} incompatible with {gain.shape[1]} features")
        if train and not self.frozen:
            n = x.shape[0]
            if n < 2:
                raise DegenerateBatchError(f"batchnorm needs at least 2 rows in train mode, got {n}")
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            x_hat = (x - mean) * inv_std
            m = self.momentum
            self.running_mean = (1.0 - m) * self.running_mean + m * mean
            # running variance tracks the unbiased estimate
            self.running_var = (1.0 - m) * self.running_var + m * var * (n / (n - 1))
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            x_hat = (x - self.running_mean) * inv_std
        self.cache = (train and not self.frozen, x_hat, inv_std)
        return x_hat * gain + shift

    def backward(self, dy):
        train, x_hat, inv_std = self.cache
        gain = self.params["gain"]
        self.grads["gain"] = (dy * x_hat).sum(axis=0, keepdims=True)
        self.grads["shift"] = dy.sum(axis=0, keepdims=True)
        dx_hat = dy * gain
        if not train:
            return dx_hat * inv_std
        n = dy.shape[0]
        return (inv_std / n) * (
            n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0)
        )


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        mask = x > 0
        self.cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        return np.where(self.cache, dy, 0.0)


class Dropout(Layer):
    """Inverted dropout; inference is the identity.

    ``frozen_mask`` pins the train-time mask, which gradient checking needs.
    """

    kind = "dropout"

    def __init__(self, p_drop: float = 0.5):
        super().__init__()
        if not 0.0 <= p_drop < 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1), got {p_drop}")
        self.p_drop = p_drop
        self.frozen_mask = None

    def forward(self, x, train=False, rng=None):
        if not train:
            self.cache = None
            return x
        if self.frozen_mask is not None:
            scale = self.frozen_mask
        else:
            if rng is None:
                raise ContractError("dropout in train mode requires a random generator")
            keep = rng.random(x.shape) >= self.p_drop
            scale = keep / (1.0 - self.p_drop)
        self.cache = scale
        return x * scale

    def backward(self, dy):
        if self.cache is None:
            return dy
        return dy * self.cache


class L2Norm(Layer):
    kind = "l2norm"

    def __init__(self, floor: float = L2_FLOOR):
        super().__init__()
        self.floor = floor

    def forward(self, x, train=False, rng=None):
        norm = np.linalg.norm(x, axis=1, keepdims=True)
        floored = norm < self.floor
        norm = np.where(floored, self.floor, norm)
        y = x / norm
        self.cache = (y, norm, floored)
        return y

    def backward(self, dy):
        y, norm, floored = self.cache
        proj = dy - y * (y * dy).sum(axis=1, keepdims=True)
        # a floored row is a constant rescaling, so its Jacobian is diagonal
        return np.where(floored, dy, proj) / norm


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class SoftmaxCrossEntropy:
    """Mean cross-entropy of softmax probabilities against integer labels."""

    def __init__(self):
        self.cache = None

    def forward(self, logits, labels):
        labels = np.asarray(labels, dtype=np.int64)
        n, c = logits.shape
        if labels.shape != (n,):
            raise ShapeError(f"softmax_ce: {labels.shape[0]} labels for logits of shape {logits.shape}")
        bad = np.flatnonzero((labels < 0) | (labels >= c))
        if bad.size:
            raise LabelError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {c})")
        z = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
        log_probs = z - log_z
        probs = np.exp(log_probs)
        loss = -log_probs[np.arange(n), labels].mean()
        self.cache = (probs, labels)
        return float(loss), probs

    def backward(self):
        probs, labels = self.cache
        n = probs.shape[0]
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return d / n


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_layers(self, prefix=""):
        for i, layer in enumerate(self.layers):
            yield f"{prefix}{i}", layer

    def parameters(self, prefix=""):
        return {
            f"{name}.{key}": value
            for name, layer in self.named_layers(prefix)
            for key, value in layer.params.items()
        }

    def gradients(self, prefix=""):
        return {
            f"{name}.{key}": layer.grads[key]
            for name, layer in self.named_layers(prefix)
            for key in layer.params
        }


# -- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update to ``params`` in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam: gradient shape {g.shape} does not match parameter {name} shape {p.shape}")
        m = state.first_moment.get(name)
        if m is not None and m.shape != p.shape:
            raise ShapeError(f"adam: moment shape {m.shape} does not match parameter {name} shape {p.shape}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.first_moment:
            state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state


# -- gradient checking --------------------------------------------------------

REL_FLOOR = 1e-10


def relative_error(analytic, numeric, floor=REL_FLOOR):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return np.abs(analytic - numeric) / denom


def _sample_coords(size, n, rng):
    if size <= n:
        return np.arange(size)
    return rng.choice(size, size=n, replace=False)


def _numeric_grad(f, array, flat_index, eps):
    flat = array.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + eps
    plus = f()
    flat[flat_index] = old - eps
    minus = f()
    flat[flat_index] = old
    return (plus - minus) / (2.0 * eps)


def _as_layers(network):
    if isinstance(network, Sequential):
        return list(network.layers)
    layers = []
    for item in network:
        layers.extend(_as_layers(item) if isinstance(item, Sequential) else [item])
    return layers


def grad_check_report(network, x, labels, eps=1e-5, n_coords=200, seed=0, scale_grads=None):
    """Per-tensor max relative error of analytic vs central-difference gradients.

    ``network`` is a layer sequence ending in logits; the loss is softmax
    cross-entropy. Dropout masks are frozen for the duration of the check and
    batchnorm runs in train mode with its running statistics restored after.
    ``scale_grads`` multiplies named analytic gradients (fault injection).
    """
    rng = np.random.default_rng(seed)
    net = Sequential(_as_layers(network))
    loss_fn = SoftmaxCrossEntropy()

    saved_buffers = [(layer, {k: v.copy() for k, v in layer.buffers().items()}) for layer in net]
    dropouts = [layer for layer in net if isinstance(layer, Dropout)]
    try:
        h = x
        for layer in net:
            if isinstance(layer, Dropout):
                keep = rng.random(h.shape) >= layer.p_drop
                layer.frozen_mask = keep / (1.0 - layer.p_drop)
            h = layer.forward(h, train=True)

        def loss_value():
            return loss_fn.forward(net.forward(x, train=True), labels)[0]

        loss_value()
        net.backward(loss_fn.backward())
        analytic = {k: g.copy() for k, g in net.gradients().items()}
        for name, factor in (scale_grads or {}).items():
            analytic[name] = analytic[name] * factor

        report = {}
        for name, p in net.parameters().items():
            coords = _sample_coords(p.size, n_coords, rng)
            numeric = np.array([_numeric_grad(loss_value, p, i, eps) for i in coords])
            errs = relative_error(analytic[name].reshape(-1)[coords], numeric)
            report[name] = float(errs.max())
        return report
    finally:
        for layer in dropouts:
            layer.frozen_mask = None
        for layer, bufs in saved_buffers:
            for k, v in bufs.items():
                setattr(layer, k, v)


def grad_check(network, x, labels, eps=1e-5, n_coords=200, seed=0, scale_grads=None) -> float:
    """Maximum relative gradient error over all parameter tensors."""
    report = grad_check_report(network, x, labels, eps, n_coords, seed, scale_grads)
    return max(report.values())


def layer_grad_check(layer, x, eps=1e-5, train=True, n_coords=200, seed=0):
    """Check one layer's input and parameter gradients against a random linear probe.

    Returns a dict with ``"input"`` plus one entry per parameter tensor.
    """
    rng = np.random.default_rng(seed)
    y = layer.forward(x, train=train, rng=np.random.default_rng(seed))
    direction = rng.standard_normal(y.shape)
    saved = {k: v.copy() for k, v in layer.buffers().items()}

    if isinstance(layer, Dropout) and train:
        layer.frozen_mask = layer.cache

    def f():
        out = layer.forward(x, train=train, rng=np.random.default_rng(seed))
        return float((out * direction).sum())

    try:
        f()
        dx = layer.backward(direction)
        analytic = {"input": dx.copy()}
        analytic.update({k: g.copy() for k, g in layer.grads.items()})
        targets = {"input": x}
        targets.update(layer.params)
        report = {}
        for name, arr in targets.items():
            coords = _sample_coords(arr.size, n_coords, rng)
            numeric = np.array([_numeric_grad(f, arr, i, eps) for i in coords])
            report[name] = float(relative_error(analytic[name].reshape(-1)[coords], numeric).max())
        return report
    finally:
        if isinstance(layer, Dropout):
            layer.frozen_mask = None
        for k, v in saved.items():
            setattr(layer, k, v)
