"""OVA-style network: shared feature extractor, closed-set linear head,
and one binary (known/unknown) classifier per known class.

The open head emits two logits per class; a two-way softmax over each pair
yields the per-class known-probability, so known and unknown probabilities
are exact complements.  `predict` applies the inference rule: take the
closed-set argmax, keep it when its known-probability is >= 0.5, otherwise
reject as unknown.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import UNKNOWN

CHECKPOINT_SCHEMA = 1


class MlpBackbone(nn.Module):
    """Small vector extractor; flattens any input to `input_dim`."""

    def __init__(self, input_dim, feature_dim=32, hidden_dim=64):
        super().__init__()
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, feature_dim)
        self.pretrained = False

    def expected_input(self):
        return "flattenable to (B, %d)" % self.input_dim

    def check_input(self, x):
        if x.ndim < 2 or int(torch.tensor(x.shape[1:]).prod()) != self.input_dim:
            raise ValueError("input shape mismatch: expected %s, got %s"
                             % (self.expected_input(), tuple(x.shape)))

    def forward(self, x):
        x = x.reshape(x.shape[0], -1)
        return self.fc2(F.relu(self.fc1(x)))


class CnnBackbone(nn.Module):
    """3-block CNN for small square images (any side >= 8)."""

    def __init__(self, in_channels, feature_dim=32, width=32):
        super().__init__()
        self.in_channels = in_channels
        self.feature_dim = feature_dim
        self.block1 = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2))
        self.block2 = nn.Sequential(
            nn.Conv2d(width, width * 2, 3, padding=1), nn.ReLU(),
            nn.MaxPool2d(2))
        self.block3 = nn.Sequential(
            nn.Conv2d(width * 2, width * 4, 3, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1))
        self.proj = nn.Linear(width * 4, feature_dim)
        self.pretrained = False

    def expected_input(self):
        return "(B, %d, H, W) with H, W >= 8" % self.in_channels

    def check_input(self, x):
        ok = (x.ndim == 4 and x.shape[1] == self.in_channels
              and x.shape[2] >= 8 and x.shape[3] >= 8)
        if not ok:
            raise ValueError("input shape mismatch: expected %s, got %s"
                             % (self.expected_input(), tuple(x.shape)))

    def forward(self, x):
        h = self.block3(self.block2(self.block1(x)))
        return self.proj(h.flatten(1))


class OvaNet(nn.Module):
    """Shared extractor + closed-set head + per-class binary open head.

    Both heads are bias-free linear maps applied to L2-normalized features
    and scaled by 1/temperature, so decisions depend on feature direction
    rather than magnitude (the classifier style of the network this design
    extends).
    """

    def __init__(self, extractor, num_known, temperature=0.05):
        super().__init__()
        if num_known < 2:
            raise ValueError("num_known must be >= 2, got %d" % num_known)
        self.extractor = extractor
        self.feature_dim = extractor.feature_dim
        self.num_known = num_known
        self.temperature = temperature
        self.closed_head = nn.Linear(self.feature_dim, num_known,
                                     bias=False)
        self.open_head = nn.Linear(self.feature_dim, 2 * num_known,
                                   bias=False)

    def features(self, batch):
        if hasattr(self.extractor, "check_input"):
            self.extractor.check_input(batch)
        return self.extractor(batch)

    def _check_feats(self, feats):
        if feats.ndim != 2 or feats.shape[1] != self.feature_dim:
            raise ValueError("features must be (B, %d), got %s"
                             % (self.feature_dim, tuple(feats.shape)))
        if feats.numel() and not torch.isfinite(feats).all():
            raise ValueError("non-finite features")

    def _normed(self, feats):
        return F.normalize(feats, dim=1, eps=1e-8)

    def closed_logits(self, feats):
        self._check_feats(feats)
        return self.closed_head(self._normed(feats)) / self.temperature

    def closed_probs(self, feats):
        return F.softmax(self.closed_logits(feats), dim=1)

    def open_known_probs(self, feats):
        """(B, num_known) matrix of per-class known-probabilities."""
        self._check_feats(feats)
        logits = self.open_head(self._normed(feats)) / self.temperature
        pairs = logits.view(-1, 2, self.num_known)
        return F.softmax(pairs, dim=1)[:, 1, :]

    def forward(self, batch):
        feats = self.features(batch)
        return self.closed_probs(feats), self.open_known_probs(feats)


@dataclass
class Prediction:
    """Inference output for one example; label is UNKNOWN when rejected."""

    label: int
    closed_probs: torch.Tensor
    open_known_probs: torch.Tensor


def predict(model, batch):
    """Apply the inference rule to a batch.

    Pseudo-label = argmax of the closed-set probabilities (ties broken by
    lowest class index); kept when the open head's known-probability at
    that label is >= 0.5 (inclusive), otherwise rejected as UNKNOWN.
    """
    with torch.no_grad():
        closed, open_known = model(batch)
    out = []
    for i in range(closed.shape[0]):
        label = int(torch.argmax(closed[i]))
        if float(open_known[i, label]) < 0.5:
            label = UNKNOWN
        out.append(Prediction(label, closed[i], open_known[i]))
    return out


def build_model(kind, sample_shape, num_known, feature_dim=32, hidden_dim=64,
                temperature=0.05, extractor=None):
    """Construct an OvaNet for data of `sample_shape`.

    kind: "mlp", "cnn", "auto" (mlp for vectors, cnn for images), or
    "custom" with an externally-built extractor exposing `feature_dim`.
    """
    if kind == "custom":
        if extractor is None:
            raise ValueError("kind='custom' requires an extractor module")
        return OvaNet(extractor, num_known, temperature=temperature)
    if kind == "auto":
        kind = "cnn" if len(sample_shape) == 3 and min(sample_shape[1:]) >= 8 \
            else "mlp"
    if kind == "mlp":
        input_dim = 1
        for d in sample_shape:
            input_dim *= d
        backbone = MlpBackbone(input_dim, feature_dim, hidden_dim)
    elif kind == "cnn":
        if len(sample_shape) != 3:
            raise ValueError("cnn extractor needs (C,H,W) data, got %s"
                             % (sample_shape,))
        backbone = CnnBackbone(sample_shape[0], feature_dim)
    else:
        raise ValueError("unknown extractor kind %r" % kind)
    model = OvaNet(backbone, num_known, temperature=temperature)
    model.extractor_kind = kind
    model.sample_shape = tuple(sample_shape)
    return model


def save_checkpoint(path, model, seed=0, iteration=0, extra=None):
    """Versioned checkpoint: metadata header plus named parameter arrays."""
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "feature_dim": model.feature_dim,
        "num_known": model.num_known,
        "extractor_kind": getattr(model, "extractor_kind", "custom"),
        "sample_shape": tuple(getattr(model, "sample_shape", ())),
        "hidden_dim": getattr(model.extractor, "hidden_dim", None),
        "temperature": model.temperature,
        "seed": seed,
        "iteration": iteration,
        "state_dict": model.state_dict(),
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path, expected_num_known=None):
    """Rebuild a model from a checkpoint; num_known mismatch is a hard error."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError("unsupported checkpoint schema %r"
                         % payload.get("schema_version"))
    if (expected_num_known is not None
            and payload["num_known"] != expected_num_known):
        raise ValueError("checkpoint has num_known=%d, expected %d"
                         % (payload["num_known"], expected_num_known))
    kind = payload["extractor_kind"]
    if kind == "custom":
        raise ValueError("checkpoint with a custom extractor must be loaded "
                         "into an existing model via load_state_dict")
    model = build_model(kind, payload["sample_shape"], payload["num_known"],
                        feature_dim=payload["feature_dim"],
                        hidden_dim=payload.get("hidden_dim") or 64)
    model.load_state_dict(payload["state_dict"])
    return model, payload
