"""The fused approximator/predictor network.

One prediction subnet computes, from the same input the approximation
subnet sees, a wide output that is split into per-layer control vectors
plus a small safety head. Each control vector multiplies (Hadamard
product) the activations of one hidden layer of the approximation subnet,
and the whole structure trains end to end against the joint loss
(approximation MSE plus classification cross entropy).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import backends
from .benchmarks import ErrorSpec, error_value
from .errors import ConfigError, NumericalError, ShapeError, TrainingDiverged
from .nn import (
    AdamState,
    ForwardTrace,
    Gradients,
    Mlp,
    SERIALIZATION_FORMAT_VERSION,
    _ACT_CODE,
    _as_batch,
    adam_step,
    finite_difference_gradients,
    loss_cross_entropy,
    loss_cross_entropy_binary,
    loss_mse,
    max_relative_error,
    mlp_backward,
    mlp_forward,
    mse_grad,
    param_count,
    scheduled_lr,
)

PRED_HEADS = ("softmax", "sigmoid")
SAFE_CLASS = 1  # softmax head class order: [unsafe, safe]
SAFE_THRESHOLD = 0.5

# Test hook: multiplies the control-vector gradient routed into the
# prediction subnet. Anything other than +1.0 corrupts exactly the gating
# path, which the gradient-check localization tests rely on.
_CONTROL_GRAD_SIGN = 1.0

# Hidden-layer biases start slightly positive in every model builder: with
# zero biases and layers as narrow as two units, dead relu units at init
# routinely killed whole layers and trapped training in bad basins.
HIDDEN_BIAS_INIT = 0.1

# stream labels for deriving independent RNG streams from one seed
INIT_STREAM = 1
SHUFFLE_STREAM = 2


@dataclass(frozen=True)
class GatingMode:
    """Which hidden layers of the approximation subnet get gated."""

    kind: str  # "all_layers" | "single_layer"
    layer: int = 0  # 1-based hidden layer index for single_layer

    def __post_init__(self):
        if self.kind not in ("all_layers", "single_layer"):
            raise ConfigError(f"unknown gating mode {self.kind!r}")
        if self.kind == "single_layer" and self.layer < 1:
            raise ConfigError("single_layer gating needs a 1-based layer index")

    @classmethod
    def all_layers(cls):
        return cls("all_layers")

    @classmethod
    def single_layer(cls, k):
        return cls("single_layer", int(k))

    @classmethod
    def parse(cls, text):
        if isinstance(text, GatingMode):
            return text
        if text == "all_layers":
            return cls.all_layers()
        if text.startswith("single_layer:"):
            return cls.single_layer(int(text.split(":", 1)[1]))
        raise ConfigError(f"cannot parse gating mode {text!r}")

    def __str__(self):
        return "all_layers" if self.kind == "all_layers" else f"single_layer:{self.layer}"


def control_width(gated_widths, head):
    """Prediction-subnet output width: gated widths plus the safety head."""
    gated_widths = list(gated_widths)
    if not gated_widths or any(w < 1 for w in gated_widths):
        raise ConfigError("gated layer widths must be a nonempty list of positives")
    if head == "softmax":
        return sum(gated_widths) + 2
    if head == "sigmoid":
        return sum(gated_widths) + 1
    raise ConfigError(f"unknown prediction head {head!r}")


def infer_pred_head(approx_topology, pred_topology, gating=None):
    """Deduce softmax vs sigmoid from the published width lists."""
    gating = GatingMode.all_layers() if gating is None else gating
    hidden = list(approx_topology[1:-1])
    widths = hidden if gating.kind == "all_layers" else [hidden[gating.layer - 1]]
    out = pred_topology[-1]
    if out == sum(widths) + 2:
        return "softmax"
    if out == sum(widths) + 1:
        return "sigmoid"
    raise ConfigError(
        f"prediction output width {out} matches neither head for gated widths {widths}"
    )


@dataclass
class FusedNet:
    """Approximation subnet + prediction subnet + the gating wiring."""

    approx: Mlp
    pred: Mlp
    gating_mode: GatingMode = field(default_factory=GatingMode.all_layers)
    pred_head: str = "softmax"

    def __post_init__(self):
        if self.pred_head not in PRED_HEADS:
            raise ConfigError(f"unknown prediction head {self.pred_head!r}")
        if self.approx.topology[0] != self.pred.topology[0]:
            raise ConfigError("both subnets must share the input width")
        if self.pred.activations[-1] != "linear":
            raise ConfigError(
                "the prediction subnet's final layer must be linear; the safety "
                "head activation is applied to its slice only"
            )
        n_hidden = self.approx.n_layers - 1
        if n_hidden < 1:
            raise ConfigError("the approximation subnet needs at least one hidden layer")
        if self.gating_mode.kind == "single_layer" and not (
            1 <= self.gating_mode.layer <= n_hidden
        ):
            raise ConfigError(
                f"single_layer index {self.gating_mode.layer} outside 1..{n_hidden}"
            )
        want = control_width([w for _, w in self.gated_layers()], self.pred_head)
        if self.pred.topology[-1] != want:
            raise ConfigError(
                f"prediction output width {self.pred.topology[-1]} != required {want} "
                f"for gating {self.gating_mode} with head {self.pred_head}"
            )

    def gated_layers(self):
        """[(1-based hidden layer index, width), ...] in layer order."""
        hidden = self.approx.topology[1:-1]
        if self.gating_mode.kind == "all_layers":
            return [(k + 1, w) for k, w in enumerate(hidden)]
        k = self.gating_mode.layer
        return [(k, hidden[k - 1])]

    def slice_map(self):
        """Control-slice offsets in the prediction output: (layer, offset, width)."""
        out, off = [], 0
        for k, w in self.gated_layers():
            out.append((k, off, w))
            off += w
        return out

    @property
    def head_width(self):
        return 2 if self.pred_head == "softmax" else 1

    def param_count(self):
        return param_count(self.approx.topology) + param_count(self.pred.topology)

    @classmethod
    def init(cls, approx_topology, pred_topology, rng=None, gating_mode=None,
             pred_head=None, control_bias=1.0):
        """Fresh fused net from the two width lists.

        The prediction head is inferred from the widths when not given.
        Control-slice bias entries start at ``control_bias`` (default 1.0)
        so gating begins near the identity; zero-initialized controls would
        annihilate the approximation subnet's forward signal at the start
        of training.
        """
        if rng is None:
            rng = np.random.default_rng()
        gating_mode = GatingMode.all_layers() if gating_mode is None else gating_mode
        if pred_head is None:
            pred_head = infer_pred_head(approx_topology, pred_topology, gating_mode)
        approx = Mlp.init(approx_topology, rng=rng)
        n_pred_layers = len(pred_topology) - 1
        pred_acts = ["relu"] * (n_pred_layers - 1) + ["linear"]
        pred = Mlp.init(pred_topology, pred_acts, rng=rng)
        for b in approx.biases[:-1]:
            b[:] = HIDDEN_BIAS_INIT
        for b in pred.biases[:-1]:
            b[:] = HIDDEN_BIAS_INIT
        net = cls(approx, pred, gating_mode, pred_head)
        for _, off, w in net.slice_map():
            pred.biases[-1][off:off + w] = control_bias
        return net

    def copy(self):
        return FusedNet(self.approx.copy(), self.pred.copy(), self.gating_mode, self.pred_head)

    def params(self):
        return self.approx.params() + self.pred.params()

    def predict_batch(self, x):
        """(approximated outputs, P(safe)) for a normalized input batch."""
        trace = fused_forward(self, x)
        return trace.output_batch, trace.p_safe

    def to_dict(self):
        return {
            "format_version": SERIALIZATION_FORMAT_VERSION,
            "kind": "fused",
            "approx": self.approx.to_dict(),
            "pred": self.pred.to_dict(),
            "gating_mode": str(self.gating_mode),
            "pred_head": self.pred_head,
            "slice_map": [
                {"layer": k, "offset": off, "width": w} for k, off, w in self.slice_map()
            ],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "fused":
            raise ConfigError(f"expected kind 'fused', got {d.get('kind')!r}")
        net = cls(
            Mlp.from_dict(d["approx"]),
            Mlp.from_dict(d["pred"]),
            GatingMode.parse(d["gating_mode"]),
            d["pred_head"],
        )
        stored = [(s["layer"], s["offset"], s["width"]) for s in d.get("slice_map", [])]
        if stored and stored != net.slice_map():
            raise ConfigError("stored slice map disagrees with topology and gating mode")
        return net


@dataclass
class FusedTrace:
    """Everything one fused forward pass produced, kept for backprop."""

    pred_trace: ForwardTrace
    pre_activations: list  # approx a^(k), batch-shaped
    activated: list  # f(a^(k)) before gating
    hidden: list  # h^(k) after gating (equals activated on ungated layers)
    controls: dict  # hidden layer index -> control slice (batch, width)
    p_raw: np.ndarray  # head slice before softmax/sigmoid
    p_safe: np.ndarray  # P(safe) per sample
    single: bool = False

    @property
    def output(self):
        out = self.hidden[-1]
        return out[0] if self.single else out

    @property
    def output_batch(self):
        return self.hidden[-1]


def _head_probabilities(p_raw, head):
    kern = backends.get()
    if head == "softmax":
        probs = kern.act_forward(p_raw, backends.SOFTMAX)
        return probs[:, SAFE_CLASS]
    probs = kern.act_forward(p_raw, backends.SIGMOID)
    return probs[:, 0]


def fused_forward(net, x):
    """Prediction subnet first, then the gated approximation subnet."""
    x, single = _as_batch(x, net.approx.topology[0])
    kern = backends.get()
    pred_trace = mlp_forward(net.pred, x)
    raw = pred_trace.output_batch
    controls = {k: raw[:, off:off + w] for k, off, w in net.slice_map()}
    p_raw = raw[:, -net.head_width:]
    p_safe = _head_probabilities(p_raw, net.pred_head)

    pre, activated, hidden = [], [], []
    h = x
    for k in range(net.approx.n_layers):
        a = kern.affine_forward(h, net.approx.weights[k], net.approx.biases[k])
        f = kern.act_forward(a, _ACT_CODE[net.approx.activations[k]])
        layer_index = k + 1
        if layer_index in controls:
            h = f * controls[layer_index]
        else:
            h = f
        pre.append(a)
        activated.append(f)
        hidden.append(h)
    return FusedTrace(pred_trace, pre, activated, hidden, controls, p_raw, p_safe, single)


# ---------------------------------------------------------------------------
# labels and loss


@dataclass(frozen=True)
class SafetyLabel:
    safe: bool


def derive_label(h, y, metric, bound):
    """Safe-to-approximate iff the error is strictly below the bound."""
    if bound <= 0:
        raise ConfigError("error bound must be > 0")
    return SafetyLabel(bool(error_value(h, y, metric) < bound))


def joint_loss(h, y, p, labels, pred_head="softmax", loss_weight=1.0):
    """(J, L_a, L_p): approximation MSE plus weighted classification loss.

    ``p`` is P(safe) per sample for a sigmoid head, or the 2-class
    distribution rows for a softmax head; ``labels`` are the derived safety
    booleans.
    """
    labels = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    l_a = loss_mse(h, y)
    if pred_head == "softmax":
        l_p = loss_cross_entropy(p, labels)
    elif pred_head == "sigmoid":
        l_p = loss_cross_entropy_binary(p, labels)
    else:
        raise ConfigError(f"unknown prediction head {pred_head!r}")
    return l_a + loss_weight * l_p, l_a, l_p


def fused_backward(net, trace, y, labels, loss_weight=1.0):
    """Gradients of the joint loss for both subnets.

    The approximation subnet receives only the approximation-loss gradient,
    with control vectors held constant along that path. The gradient with
    respect to each control slice, together with the classification
    gradient at the safety head, is assembled into one output-layer
    gradient for the prediction subnet and backpropagated through it.
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    h_out = trace.output_batch
    if y.shape != h_out.shape:
        raise ShapeError(f"target shape {y.shape} != output shape {h_out.shape}")
    labels = np.atleast_1d(np.asarray(labels)).astype(np.float64)
    batch = h_out.shape[0]
    kern = backends.get()

    g = mse_grad(h_out, y)
    control_grads = {}
    n_layers = net.approx.n_layers
    dws = [None] * n_layers
    dbs = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        layer_index = k + 1
        a = trace.pre_activations[k]
        f = trace.activated[k]
        if layer_index in trace.controls:
            control_grads[layer_index] = _CONTROL_GRAD_SIGN * g * f
            g_f = g * trace.controls[layer_index]
        else:
            g_f = g
        ga = kern.act_backward(g_f, a, f, _ACT_CODE[net.approx.activations[k]])
        below = trace.pred_trace.inputs if k == 0 else trace.hidden[k - 1]
        dws[k], dbs[k], g = kern.affine_backward(ga, below, net.approx.weights[k])
    approx_grads = Gradients(dws, dbs, g)
    if not all(np.isfinite(gr).all() for gr in approx_grads.params()):
        raise NumericalError("non-finite gradient in the approximation subnet")

    d_out = np.zeros_like(trace.pred_trace.output_batch)
    for layer_index, off, w in net.slice_map():
        d_out[:, off:off + w] = control_grads[layer_index]
    if net.pred_head == "softmax":
        probs = kern.act_forward(trace.p_raw, backends.SOFTMAX)
        onehot = np.zeros_like(probs)
        onehot[:, SAFE_CLASS] = labels
        onehot[:, 1 - SAFE_CLASS] = 1.0 - labels
        d_out[:, -2:] = loss_weight * (probs - onehot) / batch
    else:
        p = kern.act_forward(trace.p_raw, backends.SIGMOID)[:, 0]
        d_out[:, -1] = loss_weight * (p - labels) / batch
    pred_grads = mlp_backward(net.pred, trace.pred_trace, d_out)
    if not all(np.isfinite(gr).all() for gr in pred_grads.params()):
        raise NumericalError("non-finite gradient in the prediction subnet")
    return approx_grads, pred_grads


# ---------------------------------------------------------------------------
# training


@dataclass
class TraceRow:
    """One invocation-trace sample, taken at each epoch boundary."""

    epoch: int
    iteration: int
    true_invocation: float
    predicted_invocation: float
    loss_a: float
    loss_p: float


@dataclass
class TrainResult:
    model: object
    trace: list
    iterations: int
    train_time_s: float
    extras: dict = field(default_factory=dict)


def _epoch_snapshot(net, x, y, espec, epoch, iteration, loss_weight):
    trace = fused_forward(net, x)
    h = trace.output_batch
    labels = espec.safe_labels(h, y)
    if net.pred_head == "softmax":
        kern = backends.get()
        probs = kern.act_forward(trace.p_raw, backends.SOFTMAX)
        _, l_a, l_p = joint_loss(h, y, probs, labels, net.pred_head, loss_weight)
    else:
        _, l_a, l_p = joint_loss(h, y, trace.p_safe, labels, net.pred_head, loss_weight)
    return TraceRow(
        epoch=epoch,
        iteration=iteration,
        true_invocation=float(labels.mean()),
        predicted_invocation=float((trace.p_safe > SAFE_THRESHOLD).mean()),
        loss_a=l_a,
        loss_p=l_p,
    )


def train_axnet(net, dataset, cfg, loss_weight=1.0, keep_best=True):
    """End-to-end training of the fused net.

    Per batch: fused forward, safety labels re-derived from the current
    approximation output, joint loss, backward, one Adam step on each
    subnet. True and predicted invocation over the training split are
    recorded at every epoch boundary; with ``keep_best`` the parameters
    from the epoch with the highest training-split true invocation are
    restored at the end (the recorded trace stays the raw trajectory).
    A non-finite loss or gradient aborts with the last stable epoch.
    """
    x, y = dataset.X_train, dataset.Y_train
    espec = dataset.error_spec(cfg.error_bound, cfg.error_metric)
    rng = np.random.default_rng([cfg.seed, SHUFFLE_STREAM])
    n = x.shape[0]
    approx_state = AdamState.for_params(net.approx.params())
    pred_state = AdamState.for_params(net.pred.params())

    trace_rows = []
    iteration = 0
    epoch = 0
    best = (-1.0, None)
    t0 = time.process_time()
    try:
        while iteration < cfg.max_iterations:
            perm = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                if iteration >= cfg.max_iterations:
                    break
                idx = perm[start:start + cfg.batch_size]
                xb, yb = x[idx], y[idx]
                tr = fused_forward(net, xb)
                hb = tr.output_batch
                labels = espec.safe_labels(hb, yb)
                j = loss_mse(hb, yb)
                if not np.isfinite(j):
                    raise NumericalError(f"non-finite loss at iteration {iteration}")
                ag, pg = fused_backward(net, tr, yb, labels, loss_weight)
                lr = scheduled_lr(cfg.learning_rate, iteration, cfg.max_iterations)
                adam_step(net.approx.params(), ag.params(), approx_state, cfg, lr=lr)
                adam_step(net.pred.params(), pg.params(), pred_state, cfg, lr=lr)
                iteration += 1
            epoch += 1
            row = _epoch_snapshot(net, x, y, espec, epoch, iteration, loss_weight)
            trace_rows.append(row)
            if keep_best and row.true_invocation > best[0]:
                best = (row.true_invocation, [p.copy() for p in net.params()])
    except NumericalError as exc:
        raise TrainingDiverged(
            f"fused training diverged: {exc}", last_stable_epoch=epoch, trace=trace_rows
        ) from exc
    if keep_best and best[1] is not None:
        for p, saved in zip(net.params(), best[1]):
            p[:] = saved
    return TrainResult(net, trace_rows, iteration, time.process_time() - t0,
                       extras={"best_epoch_invocation": max(best[0], 0.0)})


# ---------------------------------------------------------------------------
# structural checks


def quadratic_expansion_check(net, x):
    """Gated first-hidden-layer value vs its explicit polynomial expansion.

    Valid only for the fully linear single-hidden-layer configuration with
    a single-affine-layer prediction subnet: the gated value a ⊙ c then
    equals, per dimension, a quadratic form in the inputs (all products of
    input pairs), plus mixed linear terms, plus the bias product. The
    polynomial side is evaluated with explicit loops, independent of the
    forward pass.
    """
    if any(act != "linear" for act in net.approx.activations):
        raise ConfigError("expansion check requires linear approximation activations")
    if any(act != "linear" for act in net.pred.activations):
        raise ConfigError("expansion check requires linear prediction activations")
    if net.approx.n_layers != 2:
        raise ConfigError("expansion check requires exactly one hidden layer")
    if net.pred.n_layers != 1:
        raise ConfigError("expansion check requires a single-affine-layer prediction subnet")
    gated = net.gated_layers()
    if [k for k, _ in gated] != [1]:
        raise ConfigError("expansion check requires gating on hidden layer 1")

    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    l1 = gated[0][1]
    trace = fused_forward(net, x)
    gated_value = trace.hidden[0][0].copy()

    wa, ba = net.approx.weights[0], net.approx.biases[0]
    wc, bc = net.pred.weights[0], net.pred.biases[0]
    poly = np.zeros(l1)
    for i in range(l1):
        acc = ba[i] * bc[i]
        for j in range(n):
            acc += (bc[i] * wa[j, i] + ba[i] * wc[j, i]) * x[j]
            for k in range(n):
                acc += wa[j, i] * wc[k, i] * x[j] * x[k]
        poly[i] = acc
    return gated_value, poly


def gradient_check_suite(rng, trials=50, step=1e-6, loss_weight=1.0):
    """Finite-difference check of the full fused graph on random nets.

    Labels are derived once per net and then held fixed, matching how the
    backward pass treats them. Returns (worst over approximation-subnet
    parameters, worst over prediction-subnet parameters).
    """
    worst_approx = 0.0
    worst_pred = 0.0
    for trial in range(trials):
        n_in = int(rng.integers(1, 4))
        n_hidden = int(rng.integers(1, 3))
        hidden = [int(rng.integers(1, 5)) for _ in range(n_hidden)]
        n_out = int(rng.integers(1, 3))
        approx_topology = [n_in] + hidden + [n_out]
        head = "softmax" if trial % 2 == 0 else "sigmoid"
        if n_hidden > 1 and trial % 3 == 0:
            gating = GatingMode.single_layer(int(rng.integers(1, n_hidden + 1)))
        else:
            gating = GatingMode.all_layers()
        gated = hidden if gating.kind == "all_layers" else [hidden[gating.layer - 1]]
        pred_topology = [n_in, int(rng.integers(1, 5)), control_width(gated, head)]
        net = FusedNet.init(
            approx_topology, pred_topology, rng=rng, gating_mode=gating, pred_head=head,
            control_bias=float(rng.uniform(0.5, 1.5)),
        )
        for b in net.approx.biases + net.pred.biases[:-1]:
            # keep relu pre-activations off the exact kink (see nn suite)
            b[:] = rng.normal(0.0, 0.3, size=b.shape)
        xb = rng.normal(size=(4, n_in))
        yb = rng.normal(size=(4, n_out))
        espec = ErrorSpec("absolute", 0.5)
        tr0 = fused_forward(net, xb)
        labels = espec.safe_labels(tr0.output_batch, yb)

        def loss():
            tr = fused_forward(net, xb)
            if net.pred_head == "softmax":
                probs = backends.get().act_forward(tr.p_raw, backends.SOFTMAX)
                j, _, _ = joint_loss(tr.output_batch, yb, probs, labels, "softmax", loss_weight)
            else:
                j, _, _ = joint_loss(tr.output_batch, yb, tr.p_safe, labels, "sigmoid", loss_weight)
            return j

        ag, pg = fused_backward(net, fused_forward(net, xb), yb, labels, loss_weight)
        fd_approx = finite_difference_gradients(loss, net.approx.params(), step=step)
        fd_pred = finite_difference_gradients(loss, net.pred.params(), step=step)
        worst_approx = max(worst_approx, max_relative_error(ag.params(), fd_approx))
        worst_pred = max(worst_pred, max_relative_error(pg.params(), fd_pred))
    return worst_approx, worst_pred
