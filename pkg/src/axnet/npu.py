"""Parametric latency/energy model of a tiled neural processing unit.

Closed-form, not cycle-exact: processing engines compute one neuron each
(so a layer runs in output-width / total-PE waves), the fused gating
multiply costs extra cycles on gated layers, and every sample pays a
prediction pass plus a controller dispatch before either the approximation
pass (invoked fraction) or the exact CPU computation (the rest).

Every numeric default below is a documented placeholder, not measured
hardware data; all of them are overridable via JSON or the CLI.
"""

import json
import math
from dataclasses import dataclass, asdict, replace

from .errors import ConfigError


@dataclass(frozen=True)
class NpuConfig:
    pe_count: int = 8  # PEs per tile
    tile_count: int = 8
    mac_cycles: float = 1.0  # per multiply-accumulate inside a PE
    hadamard_cycles: float = 1.0  # per gating multiply
    activation_cycles: float = 1.0  # per neuron activation
    bus_words_per_cycle: float = 8.0  # input/output transfer bandwidth
    dispatch_cycles: float = 4.0  # controller decision per sample
    cpu_cycles_per_sample: float = 500.0  # exact computation fallback
    energy_per_mac: float = 1.0  # joules per MAC, parametric unit
    energy_per_cpu_cycle: float = 0.5  # joules per CPU cycle, parametric unit

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ConfigError(f"NpuConfig.{name} must be positive, got {value}")

    @property
    def total_pes(self):
        return self.pe_count * self.tile_count

    def to_json(self):
        d = asdict(self)
        if math.isinf(d["bus_words_per_cycle"]):
            d["bus_words_per_cycle"] = "inf"
        return json.dumps(d, indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("bus_words_per_cycle") == "inf":
            d["bus_words_per_cycle"] = math.inf
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


# Rough arithmetic-operation counts of the exact benchmark functions,
# used as per-benchmark CPU-fallback defaults. Placeholders by design.
DEFAULT_CPU_CYCLES = {
    "inversek2j": 40.0,  # two atan2, one acos, a handful of mul/add
    "sobel": 30.0,  # two 9-tap dot products plus hypot
    "fft": 20.0,  # sin and cos of one angle
    "bessel": 130.0,  # ~30 series terms at 4 flops each
    "blackscholes": 80.0,  # log, exp, two erf evaluations
    "jpeg": 2048.0,  # two 8x8 matrix products
    "kmeans": 20.0,  # 3-d distance and a square root
}


def _transfer_cycles(words, cfg):
    if math.isinf(cfg.bus_words_per_cycle):
        return 0.0
    return math.ceil(words / cfg.bus_words_per_cycle)


def layer_cycles(in_width, out_width, gated, cfg):
    """Cycles for one dense layer on the PE array.

    Neuron-level parallelism: ceil(out/total PEs) waves, each costing the
    dot product, the activation, and (when gated) the control multiply;
    input and output vectors move at the bus rate.
    """
    if in_width < 1 or out_width < 1:
        raise ConfigError("layer widths must be >= 1")
    waves = math.ceil(out_width / cfg.total_pes)
    per_wave = in_width * cfg.mac_cycles + cfg.activation_cycles
    if gated:
        per_wave += cfg.hadamard_cycles
    return waves * per_wave + _transfer_cycles(in_width, cfg) + _transfer_cycles(out_width, cfg)


def network_cycles(topology, gated_layers, cfg):
    """Sum of layer_cycles over a dense stack; gated_layers holds 1-based indices."""
    total = 0.0
    for k in range(len(topology) - 1):
        total += layer_cycles(topology[k], topology[k + 1], (k + 1) in gated_layers, cfg)
    return total


def network_macs(topology, gated_layers=()):
    """Multiply counts for the energy model: MACs plus gating multiplies."""
    macs = sum(topology[k] * topology[k + 1] for k in range(len(topology) - 1))
    hadamard = sum(topology[k] for k in gated_layers)
    return macs + hadamard


@dataclass(frozen=True)
class CostReport:
    npu_cycles_pred: float
    npu_cycles_approx: float
    expected_cycles_per_sample: float
    speedup: float
    energy_reduction: float
    energy_efficiency: float
    invocation: float

    def to_dict(self):
        return asdict(self)


def expected_cost(net, invocation, cfg, cpu_cycles=None):
    """Invocation-weighted cost of running the fused net on the NPU.

    Per sample: the prediction subnet always runs, the controller
    dispatches, then the approximation subnet handles the invoked fraction
    while the CPU computes the rest exactly. Speedup and energy reduction
    are CPU cost over expected cost; energy efficiency is their ratio.
    """
    if not 0.0 <= invocation <= 1.0:
        raise ConfigError(f"invocation must be in [0, 1], got {invocation}")
    if cpu_cycles is not None:
        cfg = replace(cfg, cpu_cycles_per_sample=float(cpu_cycles))
    gated = [k for k, _ in net.gated_layers()]
    pred_cycles = network_cycles(net.pred.topology, (), cfg)
    approx_cycles = network_cycles(net.approx.topology, gated, cfg)
    expected_cycles = (
        pred_cycles
        + cfg.dispatch_cycles
        + invocation * approx_cycles
        + (1.0 - invocation) * cfg.cpu_cycles_per_sample
    )
    speedup = cfg.cpu_cycles_per_sample / expected_cycles

    pred_energy = cfg.energy_per_mac * network_macs(net.pred.topology)
    approx_energy = cfg.energy_per_mac * network_macs(
        net.approx.topology, [k for k in gated]
    )
    cpu_energy = cfg.energy_per_cpu_cycle * cfg.cpu_cycles_per_sample
    expected_energy = (
        pred_energy + invocation * approx_energy + (1.0 - invocation) * cpu_energy
    )
    energy_reduction = cpu_energy / expected_energy
    return CostReport(
        npu_cycles_pred=pred_cycles,
        npu_cycles_approx=approx_cycles,
        expected_cycles_per_sample=expected_cycles,
        speedup=speedup,
        energy_reduction=energy_reduction,
        energy_efficiency=speedup / energy_reduction,
        invocation=float(invocation),
    )
