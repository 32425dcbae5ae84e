"""Fusion heads over the projected feature spaces.

Three ways to turn (text, image) features into a decision: the Combiner
(gated convex branch mixture plus learned residual, the main model), the
feature-interaction-matrix head (flattened outer product -> MLP, used to
pre-train the visual projection), and trivial baseline fusers. The final
classifier MLP is shared by all paths.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Activation, Dropout, Linear, Module, derived_rng, sigmoid


def _rows(x, dim: int, what: str):
    arr = np.asarray(x)
    if arr.shape[-1] != dim:
        raise ShapeError(f"{what} expects last dim {dim}, got {arr.shape}")
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ShapeError(f"{what} expects a vector or batch of rows, got shape {arr.shape}")


class CombinerParams(Module):
    """Gated fusion: lambda * B_t(text) + (1 - lambda) * B_i(image) + residual.

    Branches map p -> h through a linear layer and nonlinearity; the gate
    squashes a 2h -> 1 linear map through a logistic so lambda stays in
    (0, 1); the residual is a plain 2h -> h linear map over the
    concatenated branch outputs.
    """

    def __init__(self, p: int, h: int | None = None, seed: int = 0,
                 activation: str = "relu", dtype=np.float32,
                 branch_init: str = "uniform", gate_init: str = "uniform",
                 residual_init: str = "uniform"):
        h = p if h is None else h
        self.p, self.h = int(p), int(h)

        def make(name, in_dim, out_dim, init):
            rng = derived_rng(seed, f"combiner:{name}") if init == "uniform" else None
            return Linear(in_dim, out_dim, rng=rng, name=f"combiner.{name}", dtype=dtype, init=init)

        self.text_branch = make("text_branch", p, h, branch_init)
        self.image_branch = make("image_branch", p, h, branch_init)
        self.text_act = Activation(activation)
        self.image_act = Activation(activation)
        self.gate = make("gate", 2 * h, 1, gate_init)
        self.residual = make("residual", 2 * h, h, residual_init)
        self.last_gate = None
        self._cache = None

    def params(self):
        return (self.text_branch.params() + self.image_branch.params()
                + self.gate.params() + self.residual.params())

    def forward(self, text_feat, image_feat):
        text, tsq = _rows(text_feat, self.p, "combiner text branch")
        image, isq = _rows(image_feat, self.p, "combiner image branch")
        if text.shape[0] != image.shape[0]:
            raise ShapeError(f"batch mismatch: {text.shape[0]} text vs {image.shape[0]} image rows")
        bt = self.text_act.forward(self.text_branch.forward(text))
        bi = self.image_act.forward(self.image_branch.forward(image))
        cat = np.concatenate([bt, bi], axis=1)
        lam = sigmoid(self.gate.forward(cat))
        out = lam * bt + (1.0 - lam) * bi + self.residual.forward(cat)
        self.last_gate = lam[:, 0]
        self._cache = {"bt": bt, "bi": bi, "lam": lam, "squeeze": tsq and isq}
        return out[0] if tsq and isq else out

    def backward(self, dout):
        c = self._cache
        dout = np.asarray(dout)
        if c["squeeze"]:
            dout = dout[None, :]
        bt, bi, lam = c["bt"], c["bi"], c["lam"]
        dres_cat = self.residual.backward(dout)
        dlam = np.sum(dout * (bt - bi), axis=1, keepdims=True)
        dgate_logit = dlam * lam * (1.0 - lam)
        dgate_cat = self.gate.backward(dgate_logit)
        dcat = dres_cat + dgate_cat
        dbt = dout * lam + dcat[:, : self.h]
        dbi = dout * (1.0 - lam) + dcat[:, self.h:]
        dtext = self.text_branch.backward(self.text_act.backward(dbt))
        dimage = self.image_branch.backward(self.image_act.backward(dbi))
        if c["squeeze"]:
            return dtext[0], dimage[0]
        return dtext, dimage


class InteractionHeadParams(Module):
    """MLP logit over the flattened p x p cross-interaction matrix."""

    def __init__(self, p: int, hidden: int = 64, seed: int = 0, dtype=np.float32):
        self.p = int(p)
        rng1 = derived_rng(seed, "interaction:fc1")
        rng2 = derived_rng(seed, "interaction:fc2")
        self.fc1 = Linear(p * p, hidden, rng=rng1, name="interaction.fc1", dtype=dtype)
        self.act = Activation("relu")
        self.fc2 = Linear(hidden, 1, rng=rng2, name="interaction.fc2", dtype=dtype)
        self._cache = None

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, text_feat, image_feat):
        text, tsq = _rows(text_feat, self.p, "interaction head (text)")
        image, isq = _rows(image_feat, self.p, "interaction head (image)")
        if text.shape[0] != image.shape[0]:
            raise ShapeError(f"batch mismatch: {text.shape[0]} text vs {image.shape[0]} image rows")
        # image indexes rows, text indexes columns; flattened row-major
        outer = image[:, :, None] * text[:, None, :]
        flat = outer.reshape(outer.shape[0], self.p * self.p)
        logit = self.fc2.forward(self.act.forward(self.fc1.forward(flat)))[:, 0]
        self._cache = {"text": text, "image": image, "squeeze": tsq and isq}
        return float(logit[0]) if tsq and isq else logit

    def backward(self, dlogit):
        c = self._cache
        d = np.asarray(dlogit, dtype=np.float64).reshape(-1, 1)
        dflat = self.fc1.backward(self.act.backward(self.fc2.backward(d)))
        douter = dflat.reshape(-1, self.p, self.p)
        dimage = np.sum(douter * c["text"][:, None, :], axis=2)
        dtext = np.sum(douter * c["image"][:, :, None], axis=1)
        if c["squeeze"]:
            return dtext[0], dimage[0]
        return dtext, dimage


class HeadParams(Module):
    """Final classifier: h -> h // 2 -> 1 logit, dropout before the output."""

    def __init__(self, h: int, dropout: float = 0.1, seed: int = 0, dtype=np.float32):
        hidden = max(1, int(h) // 2)
        self.h = int(h)
        rng1 = derived_rng(seed, "head:fc1")
        rng2 = derived_rng(seed, "head:fc2")
        self.fc1 = Linear(h, hidden, rng=rng1, name="head.fc1", dtype=dtype)
        self.act = Activation("relu")
        self.drop = Dropout(dropout)
        self.fc2 = Linear(hidden, 1, rng=rng2, name="head.fc2", dtype=dtype)
        self._squeeze = False

    def params(self):
        return self.fc1.params() + self.fc2.params()

    def forward(self, fused, train: bool = False, rng=None):
        x, squeeze = _rows(fused, self.h, "classifier head")
        hid = self.drop.forward(self.act.forward(self.fc1.forward(x)), train=train, rng=rng)
        self._squeeze = squeeze
        logit = self.fc2.forward(hid)[:, 0]
        return logit[0] if squeeze else logit

    def backward(self, dlogit):
        d = np.asarray(dlogit, dtype=np.float64).reshape(-1, 1)
        dx = self.fc1.backward(self.act.backward(self.drop.backward(self.fc2.backward(d))))
        return dx[0] if self._squeeze else dx


class ClassifyResult(NamedTuple):
    logit: float
    probability: float


def combine(text_feat, image_feat, params: CombinerParams):
    return params.forward(text_feat, image_feat)


def interaction_fuse(text_feat, image_feat, params: InteractionHeadParams):
    return params.forward(text_feat, image_feat)


def classify(fused, params: HeadParams, train: bool = False, rng=None):
    """Logistic probability of the hateful class; logit exposed alongside."""
    logit = params.forward(fused, train=train, rng=rng)
    prob = sigmoid(np.asarray(logit, dtype=np.float64))
    if np.isscalar(logit) or np.ndim(logit) == 0:
        return ClassifyResult(float(logit), float(prob))
    return ClassifyResult(logit, prob)


BASELINE_MODES = ("text_only", "image_only", "text_plus_ti", "sum")


def baseline_fuse(mode: str, visual=None, textual=None):
    """Comparison-row fusers; text_plus_ti expects inversion-prompt features."""
    if mode not in BASELINE_MODES:
        raise ConfigError("baseline.mode", f"unknown baseline mode {mode!r}")
    if mode in ("text_only", "text_plus_ti"):
        if textual is None:
            raise ConfigError("baseline.mode", f"{mode} requires textual features")
        return np.asarray(textual)
    if mode == "image_only":
        if visual is None:
            raise ConfigError("baseline.mode", f"{mode} requires visual features")
        return np.asarray(visual)
    if visual is None or textual is None:
        raise ConfigError("baseline.mode", "sum requires both modalities")
    v, t = np.asarray(visual), np.asarray(textual)
    if v.shape != t.shape:
        raise ShapeError(f"sum baseline needs matching shapes, got {v.shape} and {t.shape}")
    return v + t
