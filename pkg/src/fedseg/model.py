"""Tiny encoder-decoder segmentation network driven by a TrainingPlan.

One 3x3 conv per stage; 2x max-pool between encoder stages, nearest
upsampling plus additive skip connections in the decoder, and a 3x3
single-channel sigmoid head. Layer names follow the structural grammar
("enc.<stage>.conv.weight", ...) so models of different depths share a
common prefix for asymmetric aggregation.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .fingerprint import TrainingPlan
from .statedict import StateDict
from .tensor import Tensor, add, conv2d, downsample2x, relu, sigmoid, upsample2x


def _layer_rng(seed: int, name: str):
    return np.random.default_rng([seed & 0xFFFFFFFF, *name.encode("utf-8")])


def init_state_dict(plan: TrainingPlan, seed: int, node_id: int = 0,
                    in_channels: int = 1) -> StateDict:
    """He-normal conv weights, zero biases; each layer seeded by (seed, name)
    so equal seeds give identical shared layers across different depths."""
    feats = plan.features_per_stage
    entries = []

    def conv_entry(name, c_in, c_out):
        rng = _layer_rng(seed, name)
        std = np.sqrt(2.0 / (9.0 * c_in))
        entries.append((f"{name}.weight",
                        Tensor(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)))))
        entries.append((f"{name}.bias", Tensor(np.zeros(c_out))))

    conv_entry("enc.0.conv", in_channels, feats[0])
    for i in range(1, plan.num_stages):
        conv_entry(f"enc.{i}.conv", feats[i - 1], feats[i])
    for i in range(plan.num_stages - 2, -1, -1):
        conv_entry(f"dec.{i}.conv", feats[i + 1], feats[i])
    conv_entry("head", feats[0], 1)
    return StateDict(entries, node_id=node_id, round=0)


class SegModel:
    """Encoder-decoder net whose depth and patch come from a TrainingPlan."""

    def __init__(self, plan: TrainingPlan, params: StateDict):
        self.plan = plan
        self.params = params
        self._check_shapes()

    @classmethod
    def create(cls, plan: TrainingPlan, seed: int,
               node_id: int = 0) -> "SegModel":
        return cls(plan, init_state_dict(plan, seed, node_id=node_id))

    def _check_shapes(self):
        feats = self.plan.features_per_stage
        expect = {"enc.0.conv.weight": (feats[0], 1, 3, 3)}
        for i in range(1, self.plan.num_stages):
            expect[f"enc.{i}.conv.weight"] = (feats[i], feats[i - 1], 3, 3)
        for i in range(self.plan.num_stages - 1):
            expect[f"dec.{i}.conv.weight"] = (feats[i], feats[i + 1], 3, 3)
        expect["head.weight"] = (1, feats[0], 3, 3)
        for name, dims in expect.items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name!r}")
            if self.params.dims(name) != dims:
                raise ShapeError(
                    f"{name}: dims {self.params.dims(name)} != {dims}")

    def _conv(self, name, x):
        return conv2d(x, self.params[f"{name}.weight"],
                      self.params[f"{name}.bias"])

    def logits(self, x) -> Tensor:
        """Forward pass to the 1-channel head, before the sigmoid."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        n, c, h, w = x.data.shape
        p = self.plan.patch_size[0]
        if (h, w) != (p, p):
            raise ShapeError(f"input {h}x{w} != patch {p}x{p}")
        stages = self.plan.num_stages
        skips = []
        h_act = relu(self._conv("enc.0.conv", x))
        for i in range(1, stages):
            skips.append(h_act)
            h_act = relu(self._conv(f"enc.{i}.conv", downsample2x(h_act)))
        for i in range(stages - 2, -1, -1):
            up = upsample2x(h_act)
            h_act = add(relu(self._conv(f"dec.{i}.conv", up)), skips[i])
        return self._conv("head", h_act)

    def forward(self, x) -> Tensor:
        """Sigmoid probabilities, same spatial shape as the input."""
        return sigmoid(self.logits(x))

    def predict_mask(self, image_2d: np.ndarray) -> np.ndarray:
        """Binary prediction for one preprocessed [P,P] image."""
        probs = self.forward(image_2d[None, None]).data[0, 0]
        return (probs >= 0.5).astype(np.uint8)

    def load_state_dict(self, sd: StateDict):
        self.params = sd
        self._check_shapes()

    def state_dict(self) -> StateDict:
        return self.params
