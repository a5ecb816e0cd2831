"""The two classifiers: sequence (backbone->LSTM->head) and single-frame.

Both expose the same surface to the trainer: trainable_items/grad_items for
the optimizer, loss_and_backward for a training step, evaluate for
validation, and state_dict round-trips for checkpointing. The reported loss
always includes the L2 penalty, so learning curves reflect the optimized
objective.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import temporal
from .backbone import Sequential
from .layers import BatchNorm, Dense, Dropout, ReLU, softmax, softmax_cross_entropy


@dataclass(frozen=True)
class HeadConfig:
    """Dense classifier head: widths before the final class layer."""

    widths: tuple = (64,)
    dropout: float = 0.25
    l2: float = 0.01
    use_batchnorm: bool = True

    def __post_init__(self):
        if not self.widths:
            raise ValueError("head needs at least one dense width")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.l2 < 0.0:
            raise ValueError("l2 must be non-negative")


SEQUENCE_HEAD = HeadConfig(widths=(64,), dropout=0.25, l2=0.01, use_batchnorm=True)
SPATIAL_HEAD = HeadConfig(widths=(128, 64), dropout=0.5, l2=0.01, use_batchnorm=False)


def _build_head(rng, in_dim, num_classes, cfg: HeadConfig, leading_bn_dropout,
                dtype=np.float32):
    """Dense stack; optionally BatchNorm+Dropout straight after the recurrent layer."""
    layers = []
    if leading_bn_dropout:
        if cfg.use_batchnorm:
            layers.append(BatchNorm(in_dim, name="bn0", dtype=dtype))
        if cfg.dropout > 0.0:
            layers.append(Dropout(cfg.dropout, rng, name="drop0"))
    for i, width in enumerate(cfg.widths, start=1):
        layers.append(Dense(in_dim, width, rng, l2=cfg.l2, name=f"dense{i}", dtype=dtype))
        layers.append(ReLU(name=f"relu{i}"))
        if cfg.use_batchnorm:
            layers.append(BatchNorm(width, name=f"bn{i}", dtype=dtype))
        if cfg.dropout > 0.0:
            layers.append(Dropout(cfg.dropout, rng, name=f"drop{i}"))
        in_dim = width
    layers.append(Dense(in_dim, num_classes, rng, name="classifier", dtype=dtype))
    return Sequential("head", layers)


class _ModelBase:
    """Shared head/bookkeeping logic for both pipelines."""

    head: Sequential
    num_classes: int

    def _head_items(self):
        return [item for layer in self.head.layers()
                for item in layer.param_items("head/")]

    def _head_grads(self):
        grads = {}
        for layer in self.head.layers():
            for key, g in layer.grads.items():
                grads[f"head/{layer.name}/{key}"] = g
        return grads

    def l2_penalty(self) -> float:
        return sum(layer.l2_penalty() for layer in self.head.layers())

    def _head_state(self):
        state = dict(self._head_items())
        for layer in self.head.layers():
            if isinstance(layer, BatchNorm):
                state.update(dict(layer.buffer_items("head/")))
        return state

    def _load_state(self, state, mapping):
        missing = sorted(set(state) - set(mapping))
        unexpected = sorted(set(mapping) - set(state))
        if missing or unexpected:
            raise ValueError(f"state mismatch: missing {missing[:3]}, "
                             f"unexpected {unexpected[:3]}")
        for key, target in state.items():
            src = np.asarray(mapping[key])
            if src.shape != target.shape:
                raise ValueError(f"shape mismatch for {key}")
            target[...] = src.astype(target.dtype)

    def summary(self) -> dict:
        """Layer census with trainable flags, JSON-serializable."""
        trainable = {name for name, _ in self.trainable_items()}
        layers = []
        for name, param in self.all_items():
            layers.append({"param": name, "shape": list(param.shape),
                           "trainable": name in trainable})
        return {
            "model": type(self).__name__,
            "num_classes": self.num_classes,
            "trainable_parameters": int(sum(p.size for n, p in self.all_items()
                                            if n in trainable)),
            "total_parameters": int(sum(p.size for _, p in self.all_items())),
            "parameters": layers,
        }


class SequenceClassifier(_ModelBase):
    """Frozen per-frame backbone, LSTM over the frame features, dense head.

    Layer order after the time-distributed backbone: LSTM(H) -> BatchNorm ->
    Dropout -> Dense(+ReLU, L2) -> BatchNorm -> Dropout -> Dense(C) -> softmax.
    """

    def __init__(self, backbone, num_classes, head=SEQUENCE_HEAD, hidden_units=128,
                 seed=0, dtype=np.float32):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        backbone.set_freeze(backbone.num_stages)
        self.backbone = backbone
        self.num_classes = num_classes
        self.hidden_units = hidden_units
        rng = np.random.default_rng(seed)
        self.lstm = temporal.LstmWeights.init(hidden_units, backbone.feature_dim,
                                              rng=rng, dtype=dtype)
        self.head = _build_head(rng, hidden_units, num_classes, head,
                                leading_bn_dropout=True, dtype=dtype)
        self._cache = None

    def features(self, clips) -> np.ndarray:
        """(B, T, feature_dim) frame features from the frozen backbone."""
        return self.backbone.extract_timedistributed(clips)

    def _logits(self, feats, training):
        h_last, cache = temporal.forward_with_cache(self.lstm, feats)
        self._cache = cache if training else None
        return self.head.forward(h_last, training=training)

    def predict_proba(self, clips=None, features=None) -> np.ndarray:
        if features is None:
            features = self.features(clips)
        return softmax(self._logits(features, training=False))

    def evaluate(self, features, onehot):
        """(loss including L2 penalty, probs) in inference mode."""
        logits = self._logits(features, training=False)
        loss, probs, _ = softmax_cross_entropy(logits, onehot)
        return loss + self.l2_penalty(), probs

    def loss_and_backward(self, features, onehot):
        """One training forward/backward; gradients land in grad_items()."""
        logits = self._logits(features, training=True)
        loss, probs, d_logits = softmax_cross_entropy(logits, onehot)
        d_h_last = self.head.backward(d_logits)
        self._lstm_grads = temporal.backward(self._cache, d_h_last).weights
        return loss + self.l2_penalty(), probs

    def trainable_items(self):
        items = [(f"lstm/{k}", v) for k, v in self.lstm.as_dict().items()]
        return items + self._head_items()

    def all_items(self):
        return list(self.backbone.state_dict().items()) + self.trainable_items()

    def grad_items(self):
        grads = {f"lstm/{k}": v for k, v in self._lstm_grads.items()}
        grads.update(self._head_grads())
        return grads

    def state_dict(self):
        """LSTM and head parameters; the frozen backbone is stored separately."""
        state = {f"lstm/{k}": v for k, v in self.lstm.as_dict().items()}
        state.update(self._head_state())
        return state

    def load_state_dict(self, mapping):
        self._load_state(self.state_dict(), mapping)


class SpatialClassifier(_ModelBase):
    """Partially frozen backbone straight into a dense head on pooled features.

    Layer order: backbone (frozen up to `freeze_upto`) -> global average
    pooling -> Dense(+ReLU, L2) per width -> Dense(C) -> softmax, with
    Dropout between dense layers.
    """

    def __init__(self, backbone, num_classes, head=SPATIAL_HEAD, freeze_upto=None,
                 seed=0, dtype=np.float32):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        if freeze_upto is None:
            freeze_upto = 18 if backbone.name == "mobilenetv2" else 0
        backbone.set_freeze(freeze_upto)
        self.backbone = backbone
        self.num_classes = num_classes
        rng = np.random.default_rng(seed)
        self.head = _build_head(rng, backbone.feature_dim, num_classes, head,
                                leading_bn_dropout=False, dtype=dtype)

    def _logits(self, images, training):
        feats = self.backbone.forward(images, training=training)
        return self.head.forward(feats, training=training)

    def predict_proba(self, images) -> np.ndarray:
        return softmax(self._logits(images, training=False))

    def evaluate(self, images, onehot):
        logits = self._logits(images, training=False)
        loss, probs, _ = softmax_cross_entropy(logits, onehot)
        return loss + self.l2_penalty(), probs

    def loss_and_backward(self, images, onehot):
        logits = self._logits(images, training=True)
        loss, probs, d_logits = softmax_cross_entropy(logits, onehot)
        d_feats = self.head.backward(d_logits)
        self.backbone.backward(d_feats)
        return loss + self.l2_penalty(), probs

    def trainable_items(self):
        return self.backbone.trainable_items() + self._head_items()

    def all_items(self):
        items = list(self.backbone.state_dict().items())
        return items + self._head_items()

    def grad_items(self):
        grads = self.backbone.grad_items()
        grads.update(self._head_grads())
        return grads

    def state_dict(self):
        """Backbone and head parameters plus BatchNorm buffers."""
        state = self.backbone.state_dict()
        state.update(self._head_state())
        return state

    def load_state_dict(self, mapping):
        self._load_state(self.state_dict(), mapping)


def build_spatiotemporal(backbone, num_classes, head=SEQUENCE_HEAD,
                         hidden_units=128, seed=0,
                         dtype=np.float32) -> SequenceClassifier:
    return SequenceClassifier(backbone, num_classes, head=head,
                              hidden_units=hidden_units, seed=seed, dtype=dtype)


def build_spatial(backbone, num_classes, head=SPATIAL_HEAD, freeze_upto=None,
                  seed=0, dtype=np.float32) -> SpatialClassifier:
    return SpatialClassifier(backbone, num_classes, head=head,
                             freeze_upto=freeze_upto, seed=seed, dtype=dtype)
