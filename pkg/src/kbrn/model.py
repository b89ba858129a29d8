"""Recurrent classifier assembly and JSON (de)serialization."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .cells import KBRNCell, LSTMCell, Readout, TanhRNNCell
from .kernel import TARGETS, KernelDictionary, build_dictionary_uniform, covering_dictionary, init_coeffs_mimic

CELL_TYPES = ("kbrn", "tanh", "lstm")
FORMAT = "kbrn-model"


@dataclass
class ModelConfig:
    """Architecture settings.

    KBRN activations start as ``init_gain * target`` fitted by the mimic
    initializer. The default gain of 2 gives a slope of 2 at the origin, so
    the initial recurrent map can be locally expansive and long-range
    gradients are not damped before training starts.
    """

    cell: str = "kbrn"
    hidden: int = 10
    K: int = 15
    spread: float = 1.0
    learn_centers: bool = False
    forget_bias: float = 1.0
    init_target: str = "tanh"
    init_gain: float = 2.0

    def __post_init__(self):
        if self.cell not in CELL_TYPES:
            raise ValueError(f"unknown cell type {self.cell!r}; expected one of {CELL_TYPES}")
        if self.hidden < 1:
            raise ValueError("hidden size must be positive")
        if self.K < 1:
            raise ValueError("K must be positive")
        if self.spread <= 0:
            raise ValueError("spread must be positive")
        if not self.init_gain > 0:
            raise ValueError("init_gain must be positive")
        if self.init_target not in TARGETS:
            raise ValueError(f"unknown init target {self.init_target!r}; expected one of {sorted(TARGETS)}")


def warmup_dictionary(K: int) -> KernelDictionary:
    """Dictionary used before any pre-activations have been observed."""
    if K > 5:
        return covering_dictionary(-3.0, 3.0, K)
    if K == 1:
        return KernelDictionary(np.zeros(1), 1.0)
    return build_dictionary_uniform(-3.0, 3.0, K, 6.0 / (K - 1))


class SequenceClassifier:
    """A recurrent cell whose final hidden state feeds a linear readout."""

    def __init__(self, cell, readout: Readout, config: ModelConfig | None = None):
        self.cell = cell
        self.readout = readout
        self.config = config or ModelConfig(cell=cell.kind, hidden=cell.hidden_size)

    @classmethod
    def initialize(cls, config: ModelConfig, input_size: int, num_classes: int,
                   rng: np.random.Generator):
        if config.cell == "kbrn":
            d = warmup_dictionary(config.K)
            row = config.init_gain * init_coeffs_mimic(d, config.init_target, grid_n=max(200, d.size))
            cell = KBRNCell.initialize(input_size, config.hidden, rng, d, row,
                                       learn_centers=config.learn_centers)
        elif config.cell == "tanh":
            cell = TanhRNNCell.initialize(input_size, config.hidden, rng)
        else:
            cell = LSTMCell.initialize(input_size, config.hidden, rng,
                                       forget_bias=config.forget_bias)
        readout = Readout.initialize(config.hidden, num_classes, rng)
        return cls(cell, readout, config)

    @property
    def num_classes(self) -> int:
        return self.readout.params["W_out"].shape[0]

    def params(self) -> dict[str, np.ndarray]:
        """All parameter arrays by name (live references)."""
        return {**self.cell.params, **self.readout.params}

    def trainable(self) -> list[str]:
        return self.cell.trainable() + list(self.readout.params)

    def weight_names(self) -> list[str]:
        return self.cell.weight_names() + self.readout.weight_names()

    def to_dict(self) -> dict:
        doc = {
            "format": FORMAT,
            "version": 1,
            "config": asdict(self.config),
            "input_size": int(self.cell.input_size),
            "num_classes": int(self.num_classes),
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params().items()
            },
        }
        if hasattr(self.cell, "bandwidth"):
            doc["dictionary"] = {
                "centers": self.cell.params["centers"].tolist(),
                "bandwidth": self.cell.bandwidth,
            }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> "SequenceClassifier":
        if doc.get("format") != FORMAT:
            raise ValueError("not a serialized kbrn model")
        known = {f.name for f in fields(ModelConfig)}
        config = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
        arrays = {
            name: np.array(p["data"], dtype=np.float64).reshape(p["shape"])
            for name, p in doc["params"].items()
        }
        readout = Readout(arrays.pop("W_out"), arrays.pop("b_out"))
        if config.cell == "kbrn":
            d = KernelDictionary(np.array(doc["dictionary"]["centers"]), doc["dictionary"]["bandwidth"])
            cell = KBRNCell(arrays["W_in"], arrays["W_rec"], arrays["b"], d, arrays["alpha"],
                            learn_centers=config.learn_centers)
        elif config.cell == "tanh":
            cell = TanhRNNCell(arrays["W_in"], arrays["W_rec"], arrays["b"])
        else:
            cell = LSTMCell({g: arrays[f"W_{g}"] for g in "ifog"},
                            {g: arrays[f"b_{g}"] for g in "ifog"})
        return cls(cell, readout, config)

    @classmethod
    def from_json(cls, text: str) -> "SequenceClassifier":
        return cls.from_dict(json.loads(text))
