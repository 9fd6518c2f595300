"""Toy encoder / dilated-decoder segmentation network.

Encoder: four conv3x3 + ReLU blocks (strides 1, 2, 1, 2; widths 16, 32, 32, 64).
Decoder: four parallel dilated conv3x3 + ReLU branches (rates 1, 2, 4, 8) on the
encoder output, summed, then a 1x1 classifier and x4 bilinear upsampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor, as_tensor, bilinear_resize, conv2d, pointwise_conv, relu

ENCODER_BLOCKS = (("L1", 16, 1), ("L2", 32, 2), ("L3", 32, 1), ("L4", 64, 2))
DILATION_RATES = (1, 2, 4, 8)
FEATURE_CHANNELS = 64
DOWNSAMPLE = 4
KERNEL = 3


class FreezePolicy(str, Enum):
    NONE = "none"
    ENCODER = "encoder"  # E_F
    FIRST_TWO = "first-two"  # E_2LF


FROZEN_BLOCKS = {
    FreezePolicy.NONE: (),
    FreezePolicy.ENCODER: tuple(name for name, _, _ in ENCODER_BLOCKS),
    FreezePolicy.FIRST_TWO: ("L1", "L2"),
}


@dataclass
class SegOutput:
    features: Tensor
    dilations: list[Tensor]
    logits: Tensor


class SegModel:
    """Parameters are kept in an insertion-ordered dict keyed by dotted names."""

    def __init__(self, num_classes: int, seed: int = 0, init: str = "he", in_channels: int = 3):
        if num_classes < 1:
            raise ParameterError(f"num_classes must be >= 1, got {num_classes}")
        if init not in ("he", "zeros"):
            raise ParameterError(f"unknown init {init!r}")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def make(name, shape, fan_in):
            if init == "zeros":
                w = np.zeros(shape, dtype=np.float32)
            else:
                bound = math.sqrt(6.0 / fan_in)
                w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
            self.params[f"{name}.bias"] = Tensor(np.zeros(shape[-1], np.float32), requires_grad=True, name=f"{name}.bias")

        cin = in_channels
        for name, width, _ in ENCODER_BLOCKS:
            make(f"enc.{name}", (KERNEL, KERNEL, cin, width), KERNEL * KERNEL * cin)
            cin = width
        for i, _ in enumerate(DILATION_RATES, start=1):
            make(f"dec.d{i}", (KERNEL, KERNEL, FEATURE_CHANNELS, FEATURE_CHANNELS), KERNEL * KERNEL * FEATURE_CHANNELS)
        make("head", (1, 1, FEATURE_CHANNELS, num_classes), FEATURE_CHANNELS)

    @classmethod
    def from_params(cls, num_classes: int, arrays: dict[str, np.ndarray]) -> "SegModel":
        model = cls(num_classes, init="zeros")
        if list(arrays) != list(model.params):
            missing = set(model.params) ^ set(arrays)
            raise ShapeError(f"parameter names do not match the architecture: {sorted(missing)}")
        for name, arr in arrays.items():
            if arr.shape != model.params[name].shape:
                raise ShapeError(f"{name}: expected shape {model.params[name].shape}, got {arr.shape}")
            model.params[name] = Tensor(np.array(arr, dtype=np.float32), requires_grad=True, name=name)
        return model

    def __call__(self, x) -> SegOutput:
        return self.forward(x)

    def forward(self, x) -> SegOutput:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ShapeError(f"expected a B x H x W x {self.in_channels} batch, got {x.shape}")
        H, W = x.shape[1], x.shape[2]
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise ShapeError(f"input height and width must be divisible by {DOWNSAMPLE}, got {H}x{W}")
        p = self.params
        h = x
        for name, _, stride in ENCODER_BLOCKS:
            h = relu(conv2d(h, p[f"enc.{name}.weight"], p[f"enc.{name}.bias"], stride=stride))
        features = h
        dilations = [
            relu(conv2d(features, p[f"dec.d{i}.weight"], p[f"dec.d{i}.bias"], dilation=rate))
            for i, rate in enumerate(DILATION_RATES, start=1)
        ]
        merged = dilations[0]
        for d in dilations[1:]:
            merged = merged + d
        coarse = pointwise_conv(merged, p["head.weight"], p["head.bias"])
        logits = bilinear_resize(coarse, H, W)
        return SegOutput(features, dilations, logits)

    def named_parameters(self):
        return self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = np.zeros_like(t.data)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def copy(self) -> "SegModel":
        clone = SegModel.from_params(self.num_classes, self.state_dict())
        for name, t in self.params.items():
            clone.params[name].requires_grad = t.requires_grad
        return clone


def encoder_param_names(model: SegModel, blocks=None) -> list[str]:
    blocks = blocks if blocks is not None else [name for name, _, _ in ENCODER_BLOCKS]
    return [n for n in model.params if n.split(".")[0] == "enc" and n.split(".")[1] in blocks]


class ModelSnapshot:
    """Frozen, read-only copy of a model used as the distillation teacher."""

    def __init__(self, model: SegModel):
        self._model = model.copy()
        for t in self._model.params.values():
            t.requires_grad = False
            t.data.flags.writeable = False

    @property
    def num_classes(self) -> int:
        return self._model.num_classes

    def forward(self, x) -> SegOutput:
        return self._model.forward(x)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return self._model.state_dict()

    def to_model(self) -> SegModel:
        """A fresh trainable model with the snapshot's weights."""
        return SegModel.from_params(self.num_classes, self.state_dict())


def snapshot(model: SegModel) -> ModelSnapshot:
    return ModelSnapshot(model)


def extend_classifier(model: SegModel, added: int, seed: int = 0) -> SegModel:
    """Return a copy of ``model`` whose classifier has ``added`` extra output channels.

    New weights ~ N(0, 0.01^2), new biases -ln(C_new); everything else is copied
    unchanged.
    """
    if added < 1:
        raise ParameterError(f"added must be >= 1, got {added}")
    rng = np.random.default_rng(seed)
    state = model.state_dict()
    c_new = model.num_classes + added
    w_old, b_old = state["head.weight"], state["head.bias"]
    w_new = rng.normal(0.0, 0.01, size=w_old.shape[:3] + (added,)).astype(np.float32)
    state["head.weight"] = np.concatenate([w_old, w_new], axis=3)
    state["head.bias"] = np.concatenate([b_old, np.full(added, -math.log(c_new), np.float32)])
    out = SegModel.from_params(c_new, state)
    for name, t in model.params.items():
        out.params[name].requires_grad = t.requires_grad
    return out


def apply_freeze(model: SegModel, policy: FreezePolicy | str) -> None:
    """Mark the policy's encoder blocks as frozen; every other parameter becomes trainable."""
    policy = FreezePolicy(policy)
    frozen = set(encoder_param_names(model, FROZEN_BLOCKS[policy]))
    for name, t in model.params.items():
        t.requires_grad = name not in frozen
        t.grad = np.zeros_like(t.data)


def frozen_names(model: SegModel) -> list[str]:
    return [name for name, t in model.params.items() if not t.requires_grad]

