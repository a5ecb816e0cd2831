"""Convolutional feature extractors with stage-level freezing.

A backbone is an ordered list of stages ending in global average pooling.
Freezing always covers a prefix of the stages: frozen layers keep their
parameters fixed and frozen BatchNorm layers normalize with running
statistics even in training mode.
"""
from __future__ import annotations

import numpy as np

from .layers import (
    BatchNorm,
    Conv2d,
    DepthwiseConv2d,
    GlobalAvgPool,
    ReLU,
    ReLU6,
)


class Sequential:
    """A named, ordered group of layers acting as one backbone stage."""

    def __init__(self, name, layers):
        self.name = name
        self._layers = list(layers)

    def layers(self):
        return list(self._layers)

    def forward(self, x, training=False):
        for layer in self._layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, d_out):
        for layer in reversed(self._layers):
            d_out = layer.backward(d_out)
        return d_out


class InvertedResidual:
    """Expand (1x1) -> depthwise (3x3) -> project (1x1) with optional skip."""

    def __init__(self, rng, in_channels, out_channels, stride, expand, name,
                 dtype=np.float32):
        mid = in_channels * expand
        layers = []
        if expand != 1:
            layers += [
                Conv2d(in_channels, mid, rng, kernel=1, name="expand_conv", dtype=dtype),
                BatchNorm(mid, name="expand_bn", dtype=dtype),
                ReLU6(name="expand_relu6"),
            ]
        layers += [
            DepthwiseConv2d(mid, rng, stride=stride, name="dw_conv", dtype=dtype),
            BatchNorm(mid, name="dw_bn", dtype=dtype),
            ReLU6(name="dw_relu6"),
            Conv2d(mid, out_channels, rng, kernel=1, name="project_conv", dtype=dtype),
            BatchNorm(out_channels, name="project_bn", dtype=dtype),
        ]
        self.name = name
        self._layers = layers
        self.residual = stride == 1 and in_channels == out_channels

    def layers(self):
        return list(self._layers)

    def forward(self, x, training=False):
        y = x
        for layer in self._layers:
            y = layer.forward(y, training=training)
        return x + y if self.residual else y

    def backward(self, d_out):
        d = d_out
        for layer in reversed(self._layers):
            d = layer.backward(d)
        return d + d_out if self.residual else d


class FeatureExtractor:
    """Stage list plus global average pooling into a flat feature vector."""

    def __init__(self, name, stages, feature_dim, input_side=None):
        self.name = name
        self.stages = list(stages)
        self.feature_dim = feature_dim
        self.input_side = input_side
        self.pool = GlobalAvgPool(name="gap")
        self.freeze_upto = 0

    @property
    def num_stages(self):
        return len(self.stages)

    @property
    def frozen(self):
        return self.freeze_upto == self.num_stages

    def set_freeze(self, upto):
        """Freeze stages [0, upto); the rest stay trainable."""
        if not 0 <= upto <= self.num_stages:
            raise ValueError(
                f"freeze boundary {upto} outside [0, {self.num_stages}]")
        self.freeze_upto = upto
        for i, stage in enumerate(self.stages):
            for layer in stage.layers():
                layer.frozen = i < upto

    def freeze_census(self):
        """Per-stage freeze status, in order. Useful for summaries and tests."""
        return [{"stage": s.name, "frozen": all(l.frozen for l in s.layers())}
                for s in self.stages]

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise ValueError(f"expected (B, H, W, C) input, got shape {x.shape}")
        if self.input_side is not None and x.shape[1:3] != (self.input_side, self.input_side):
            raise ValueError(f"{self.name} expects {self.input_side}x{self.input_side} "
                             f"frames, got {x.shape[1]}x{x.shape[2]}")
        for stage in self.stages:
            x = stage.forward(x, training=training)
        return self.pool.forward(x, training=training)

    def backward(self, d_features):
        """Backpropagate through the trainable suffix; frozen prefix is skipped."""
        d = self.pool.backward(d_features)
        for stage in reversed(self.stages[self.freeze_upto:]):
            d = stage.backward(d)
        return d

    def extract(self, images) -> np.ndarray:
        """Inference-mode features, (B, feature_dim)."""
        return self.forward(images, training=False)

    def extract_timedistributed(self, clips) -> np.ndarray:
        """Apply the backbone to every frame of (B, T, H, W, C) clips.

        Slice t of the output is bit-identical to ``extract(clips[:, t])``:
        frames share weights and see exactly the per-frame computation.
        (Folding frames into the batch axis instead would change BLAS
        blocking and break that exactness at float32.)
        """
        if clips.ndim != 5:
            raise ValueError(f"expected (B, T, H, W, C) clips, got shape {clips.shape}")
        T = clips.shape[1]
        return np.stack([self.extract(clips[:, t]) for t in range(T)], axis=1)

    def _named_layers(self):
        for stage in self.stages:
            for layer in stage.layers():
                yield f"{self.name}/{stage.name}/", layer

    def trainable_items(self):
        items = []
        for prefix, layer in self._named_layers():
            if not layer.frozen:
                items.extend(layer.param_items(prefix))
        return items

    def grad_items(self):
        grads = {}
        for prefix, layer in self._named_layers():
            if layer.frozen:
                continue
            for key, g in layer.grads.items():
                grads[f"{prefix}{layer.name}/{key}"] = g
        return grads

    def state_dict(self):
        state = {}
        for prefix, layer in self._named_layers():
            state.update(dict(layer.param_items(prefix)))
            if isinstance(layer, BatchNorm):
                state.update(dict(layer.buffer_items(prefix)))
        return state

    def load_state_dict(self, mapping):
        """Copy arrays into the model; keys and shapes must match exactly."""
        state = self.state_dict()
        missing = sorted(set(state) - set(mapping))
        unexpected = sorted(set(mapping) - set(state))
        if missing or unexpected:
            raise ValueError(
                f"state mismatch: missing {missing[:3]}{'...' if len(missing) > 3 else ''}, "
                f"unexpected {unexpected[:3]}{'...' if len(unexpected) > 3 else ''}")
        for key, target in state.items():
            src = np.asarray(mapping[key])
            if src.shape != target.shape:
                raise ValueError(f"shape mismatch for {key}: "
                                 f"{src.shape} vs {target.shape}")
            target[...] = src.astype(target.dtype)

    def load_npz(self, path):
        with np.load(path) as data:
            self.load_state_dict({k: data[k] for k in data.files})

    def save_npz(self, path):
        np.savez(path, **self.state_dict())


def _conv_bn_relu6(rng, cin, cout, kernel, stride, dtype):
    return [
        Conv2d(cin, cout, rng, kernel=kernel, stride=stride, name="conv", dtype=dtype),
        BatchNorm(cout, name="bn", dtype=dtype),
        ReLU6(name="relu6"),
    ]


# (expand, out_channels, repeats, first_stride) per inverted-residual group
MOBILENETV2_GROUPS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def build_mobilenet_v2(rng, input_side=224, dtype=np.float32) -> FeatureExtractor:
    """MobileNetV2 feature trunk: stem + 17 inverted residuals + 1280-wide head.

    19 stages in total, so a freeze boundary of 18 leaves exactly the head
    convolution trainable. The stage order (stem, block01..block17, head) is
    the layer enumeration that freeze boundaries refer to.
    """
    stages = [Sequential("stem", _conv_bn_relu6(rng, 3, 32, kernel=3, stride=2, dtype=dtype))]
    cin = 32
    index = 1
    for expand, cout, repeats, first_stride in MOBILENETV2_GROUPS:
        for r in range(repeats):
            stride = first_stride if r == 0 else 1
            stages.append(InvertedResidual(rng, cin, cout, stride, expand,
                                           name=f"block{index:02d}", dtype=dtype))
            cin = cout
            index += 1
    stages.append(Sequential("head", _conv_bn_relu6(rng, cin, 1280, kernel=1, stride=1,
                                                    dtype=dtype)))
    return FeatureExtractor("mobilenetv2", stages, feature_dim=1280,
                            input_side=input_side)


def build_tiny_cnn(rng, input_side=None, dtype=np.float32) -> FeatureExtractor:
    """Small fixed random conv stack for cheap frame features (3 stages, 32-d)."""
    widths = (8, 16, 32)
    stages = []
    cin = 3
    for i, cout in enumerate(widths, start=1):
        stages.append(Sequential(f"conv{i}", [
            Conv2d(cin, cout, rng, kernel=3, stride=2, name="conv", dtype=dtype),
            ReLU(name="relu"),
        ]))
        cin = cout
    return FeatureExtractor("tinycnn", stages, feature_dim=widths[-1],
                            input_side=input_side)


BACKBONES = {
    "mobilenetv2": build_mobilenet_v2,
    "tinycnn": build_tiny_cnn,
}


def build_backbone(name, rng, input_side=None, dtype=np.float32) -> FeatureExtractor:
    try:
        factory = BACKBONES[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; expected one of "
                         f"{sorted(BACKBONES)}") from None
    if input_side is None:
        return factory(rng, dtype=dtype)
    return factory(rng, input_side=input_side, dtype=dtype)
