"""Model serialization: one JSON document per trained model.

Floats are emitted with Python's shortest round-trip repr, so save/load
reproduces every parameter bit-exactly.
"""

import json
from pathlib import Path

from .baselines import SeparatePair, SharedNet
from .errors import ConfigError
from .fusion import FusedNet
from .nn import Mlp

_KINDS = {
    "mlp": Mlp,
    "fused": FusedNet,
    "pair": SeparatePair,
    "shared": SharedNet,
}


def model_to_dict(model, metadata=None):
    d = model.to_dict()
    if metadata:
        d["metadata"] = dict(metadata)
    return d


def model_from_dict(d):
    kind = d.get("kind")
    if kind not in _KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; valid: {', '.join(_KINDS)}")
    return _KINDS[kind].from_dict(d)


def save_model(model, path, metadata=None):
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model, metadata), indent=2))
    return path


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
