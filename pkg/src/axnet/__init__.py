"""Neural approximate computing with a fused approximator/predictor network.

A prediction subnet gates the hidden activations of an approximation
subnet through control vectors and classifies inputs as safe to
approximate; both train end to end against a joint loss. The package also
ships the classical baselines (onepass, iterative, weight sharing), seven
analytic benchmark kernels with datasets and error metrics, the four
evaluation metrics with a matched-budget comparison harness, a parametric
NPU cost model, and a CLI that drives all of it.
"""

from . import backends
from .benchmarks import (
    BENCHMARKS,
    Benchmark,
    Dataset,
    ErrorSpec,
    error_value,
    eval_benchmark,
    generate_dataset,
)
from .errors import AxNetError, ConfigError, NumericalError, ShapeError, TrainingDiverged
from .fusion import FusedNet, GatingMode, control_width, fused_backward, fused_forward, train_axnet
from .baselines import (
    SeparatePair,
    SharedNet,
    train_iterative,
    train_onepass,
    train_weight_sharing,
)
from .metrics import (
    EvalReport,
    compare_matched,
    evaluate_model,
    overall_error,
    predicted_invocation,
    prediction_accuracy,
    true_invocation,
)
from .nn import AdamState, Mlp, TrainConfig, adam_step, mlp_backward, mlp_forward, param_count
from .npu import CostReport, NpuConfig, expected_cost, layer_cycles

__version__ = "0.1.0"
