"""Dense multilayer-perceptron substrate.

Everything downstream (the fused network, the baseline trainers) is built
from the pieces here: the ``Mlp`` container, hand-written forward/backward
passes, the two loss functions, a bias-corrected Adam optimizer and a
central-finite-difference gradient checker.

All arithmetic is float64. Weight matrices are (fan_in, fan_out); batches
are row-major (batch, features).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import backends
from .errors import ConfigError, NumericalError, ShapeError

ACTIVATION_TAGS = ("linear", "relu", "sigmoid", "softmax")
_ACT_CODE = {
    "linear": backends.LINEAR,
    "relu": backends.RELU,
    "sigmoid": backends.SIGMOID,
    "softmax": backends.SOFTMAX,
}

PROB_FLOOR = 1e-12  # clamp for log() in cross entropy

SERIALIZATION_FORMAT_VERSION = 1


def glorot_uniform(fan_in, fan_out, rng):
    """Weight init: uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class Mlp:
    """A plain MLP: layer widths, per-layer weights/biases/activations."""

    topology: list
    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        self.topology = [int(w) for w in self.topology]
        if len(self.topology) < 2:
            raise ConfigError("topology needs at least input and output widths")
        if any(w < 1 for w in self.topology):
            raise ConfigError(f"layer widths must be >= 1, got {self.topology}")
        n_layers = len(self.topology) - 1
        if not (len(self.weights) == len(self.biases) == len(self.activations) == n_layers):
            raise ConfigError("weights/biases/activations must have one entry per layer")
        for k in range(n_layers):
            want = (self.topology[k], self.topology[k + 1])
            self.weights[k] = np.ascontiguousarray(self.weights[k], dtype=np.float64)
            self.biases[k] = np.ascontiguousarray(self.biases[k], dtype=np.float64)
            if self.weights[k].shape != want:
                raise ConfigError(f"layer {k}: weight shape {self.weights[k].shape} != {want}")
            if self.biases[k].shape != (want[1],):
                raise ConfigError(f"layer {k}: bias shape {self.biases[k].shape} != ({want[1]},)")
            if self.activations[k] not in ACTIVATION_TAGS:
                raise ConfigError(f"unknown activation {self.activations[k]!r}")
            if self.activations[k] == "softmax" and k != n_layers - 1:
                raise ConfigError("softmax is only allowed on the final layer")

    @classmethod
    def init(cls, topology, activations=None, rng=None):
        """Fresh network: Glorot-uniform weights, zero biases.

        Default activations are relu on hidden layers and linear on the
        output layer.
        """
        if rng is None:
            rng = np.random.default_rng()
        topology = [int(w) for w in topology]
        n_layers = len(topology) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["linear"]
        weights = [glorot_uniform(topology[k], topology[k + 1], rng) for k in range(n_layers)]
        biases = [np.zeros(topology[k + 1]) for k in range(n_layers)]
        return cls(topology, weights, biases, list(activations))

    @property
    def n_layers(self):
        return len(self.topology) - 1

    def params(self):
        """Flat parameter list: [W0, b0, W1, b1, ...]."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self):
        return Mlp(
            list(self.topology),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def all_finite(self):
        return all(np.isfinite(p).all() for p in self.params())

    def to_dict(self):
        return {
            "format_version": SERIALIZATION_FORMAT_VERSION,
            "kind": "mlp",
            "topology": list(self.topology),
            "activations": list(self.activations),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "mlp":
            raise ConfigError(f"expected kind 'mlp', got {d.get('kind')!r}")
        return cls(
            d["topology"],
            [np.array(w, dtype=np.float64) for w in d["weights"]],
            [np.array(b, dtype=np.float64) for b in d["biases"]],
            list(d["activations"]),
        )


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass, kept for backprop.

    ``pre_activations[k]`` / ``post_activations[k]`` hold the affine result
    and the activated output of layer k, always batch-shaped (batch, width).
    ``inputs`` is the raw batch. ``single`` marks a 1-D call so ``output``
    can return a vector again.
    """

    inputs: np.ndarray
    pre_activations: list
    post_activations: list
    single: bool = False

    @property
    def output(self):
        out = self.post_activations[-1]
        return out[0] if self.single else out

    @property
    def output_batch(self):
        return self.post_activations[-1]


@dataclass
class Gradients:
    """Per-layer parameter gradients plus the gradient w.r.t. the input."""

    weights: list
    biases: list
    inputs: np.ndarray = None

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def _as_batch(x, width, what="input"):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what} width {x.shape[-1] if x.ndim else 0} != expected {width}")
    return np.ascontiguousarray(x), single


def mlp_forward(net, x):
    """Run the activation-applied affine chain, recording a full trace."""
    x, single = _as_batch(x, net.topology[0])
    kern = backends.get()
    pre, post = [], []
    h = x
    for k in range(net.n_layers):
        a = kern.affine_forward(h, net.weights[k], net.biases[k])
        h = kern.act_forward(a, _ACT_CODE[net.activations[k]])
        pre.append(a)
        post.append(h)
    return ForwardTrace(x, pre, post, single)


def mlp_backward(net, trace, loss_grad, logits_grad=False):
    """Backpropagate loss_grad (dL/d output) through the trace.

    Returns per-layer dW, db and the gradient w.r.t. the network input.
    With ``logits_grad=True`` the gradient is taken w.r.t. the final
    pre-activation instead, skipping the last activation derivative; the
    classifier trainers use this with the softmax/cross-entropy shortcut.
    """
    g = np.asarray(loss_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g.reshape(1, -1)
    out = trace.post_activations[-1]
    if g.shape != out.shape:
        raise ShapeError(f"loss gradient shape {g.shape} != output shape {out.shape}")
    kern = backends.get()
    dws = [None] * net.n_layers
    dbs = [None] * net.n_layers
    for k in range(net.n_layers - 1, -1, -1):
        a = trace.pre_activations[k]
        h = trace.post_activations[k]
        if k == net.n_layers - 1 and logits_grad:
            ga = g
        else:
            ga = kern.act_backward(g, a, h, _ACT_CODE[net.activations[k]])
        below = trace.inputs if k == 0 else trace.post_activations[k - 1]
        dws[k], dbs[k], g = kern.affine_backward(ga, below, net.weights[k])
    return Gradients(dws, dbs, g)


# ---------------------------------------------------------------------------
# losses


def loss_mse(pred, target):
    """Mean of squared componentwise differences."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.size == 0:
        raise ShapeError("empty vectors rejected")
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(d * d))


def mse_grad(pred, target):
    """d(loss_mse)/d(pred); mean convention matches loss_mse."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return 2.0 * (pred - target) / pred.size


def loss_cross_entropy(pred, label):
    """-log(probability assigned to the true class).

    ``pred`` is one post-softmax distribution (rows must sum to 1 within
    1e-9) and ``label`` the true class index; batch form takes a (batch,
    classes) matrix and an index vector. Probabilities are clamped below
    at 1e-12.
    """
    p = np.asarray(pred, dtype=np.float64)
    if p.size == 0:
        raise ShapeError("empty vectors rejected")
    single = p.ndim == 1
    if single:
        p = p.reshape(1, -1)
    sums = p.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        raise ConfigError("cross entropy input rows must sum to 1 within 1e-9")
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    picked = p[np.arange(p.shape[0]), labels]
    return float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR))))


def loss_cross_entropy_binary(p_safe, label):
    """Binary cross entropy on a single sigmoid probability per sample."""
    p = np.atleast_1d(np.asarray(p_safe, dtype=np.float64))
    if p.size == 0:
        raise ShapeError("empty vectors rejected")
    y = np.atleast_1d(np.asarray(label, dtype=np.float64))
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    """Optimizer and run hyperparameters shared by every trainer."""

    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_iterations: int = 3000
    error_bound: float = 0.05
    error_metric: str = "absolute"
    seed: int = 0

    def __post_init__(self):
        if self.error_bound <= 0:
            raise ConfigError("error_bound must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.error_metric not in ("relative", "absolute", "image_diff"):
            raise ConfigError(f"unknown error metric {self.error_metric!r}")
        self.seed = int(self.seed) & 0xFFFFFFFFFFFFFFFF

    def replace(self, **kw):
        d = self.__dict__.copy()
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state, config, lr=None):
    """One bias-corrected Adam update, in place on params and state.

    ``lr`` overrides the configured learning rate (the trainers pass their
    scheduled per-step value). Aborts with a diagnostic when any gradient
    is non-finite.
    """
    if len(params) != len(state.m):
        raise ShapeError("optimizer state does not match parameter list")
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {i} (shape {g.shape})")
    state.t += 1
    kern = backends.get()
    step_lr = config.learning_rate if lr is None else lr
    for p, g, m, v in zip(params, grads, state.m, state.v):
        kern.adam_update(
            p, g, m, v, state.t,
            step_lr, config.adam_beta1, config.adam_beta2, config.adam_eps,
        )
    return params, state


def scheduled_lr(base_lr, step, total_steps, floor=0.05):
    """Cosine decay from base_lr down to floor * base_lr over total_steps.

    Every trainer uses this schedule; the small floor keeps late-phase
    label churn from freezing the run entirely.
    """
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return base_lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------------------
# parameter counting and the finite-difference oracle


def param_count(topology):
    """Weights plus biases of a dense stack of layer widths."""
    topology = list(topology)
    if len(topology) < 2:
        raise ConfigError("topology needs at least 2 widths")
    return sum(topology[k] * topology[k + 1] + topology[k + 1] for k in range(len(topology) - 1))


def finite_difference_gradients(f, params, step=1e-6):
    """Central finite differences of scalar f() w.r.t. each array in params.

    ``f`` is re-evaluated after in-place perturbation of single entries, so
    it must read the live arrays. This is the reference oracle the analytic
    backward passes are tested against; it deliberately shares no code with
    them.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            up = f()
            flat_p[i] = orig - step
            down = f()
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-5):
    """Worst |a - n| / max(|a|, |n|, floor) over paired gradient arrays.

    The floor keeps central-difference roundoff (about 2e-10 absolute at
    step 1e-6 for order-1 losses) from dominating the ratio on gradients
    that are essentially zero.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradient_check_suite(rng, trials=100, step=1e-6):
    """Random small-net backprop checks across activation/loss combos.

    Returns the worst relative error seen. Networks stay at <= 5 neurons
    per layer so the finite-difference sweep is cheap.
    """
    worst = 0.0
    combos = [
        (["relu", "linear"], "mse"),
        (["sigmoid", "linear"], "mse"),
        (["linear", "linear"], "mse"),
        (["relu", "sigmoid"], "mse"),
        (["relu", "softmax"], "xent"),
        (["sigmoid", "softmax"], "xent"),
    ]
    for trial in range(trials):
        acts, loss_kind = combos[trial % len(combos)]
        topo = [int(rng.integers(1, 6)) for _ in range(3)]
        if loss_kind == "xent":
            topo[-1] = max(2, topo[-1])
        net = Mlp.init(topo, acts, rng=rng)
        for b in net.biases:
            # zero biases put relu pre-activations exactly on the kink when a
            # narrow layer saturates; generic biases keep FD well-defined
            b[:] = rng.normal(0.0, 0.3, size=b.shape)
        x = rng.normal(size=(3, topo[0]))
        if loss_kind == "mse":
            y = rng.normal(size=(3, topo[-1]))

            def loss():
                return loss_mse(mlp_forward(net, x).output_batch, y)

            trace = mlp_forward(net, x)
            analytic = mlp_backward(net, trace, mse_grad(trace.output_batch, y))
        else:
            labels = rng.integers(0, topo[-1], size=3)

            def loss():
                return loss_cross_entropy(mlp_forward(net, x).output_batch, labels)

            trace = mlp_forward(net, x)
            probs = trace.output_batch
            # dL/d(prob): -1/p on the true class, averaged over the batch
            g = np.zeros_like(probs)
            rows = np.arange(probs.shape[0])
            g[rows, labels] = -1.0 / np.maximum(probs[rows, labels], PROB_FLOOR) / probs.shape[0]
            analytic = mlp_backward(net, trace, g)
        numeric = finite_difference_gradients(loss, net.params(), step=step)
        worst = max(worst, max_relative_error(analytic.params(), numeric))
    return worst
