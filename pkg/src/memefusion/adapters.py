"""Trainable linear projections over the frozen joint embedding space.

Each projection (visual, textual, phi) is an independent weight + bias
pair with its own freeze flag; the two-stage schedule flips those flags
between stages while the encoders stay frozen throughout.
"""

from __future__ import annotations

import numpy as np

from .backbone.base import FeatureVector
from .errors import ArgumentError, ShapeError
from .nn import Linear, Module, derived_rng

PROJECTION_NAMES = ("visual_proj", "textual_proj", "phi_proj")
SCHEMES = ("identity_padded", "seeded_uniform")


class ProjectionParams(Module):
    """One named linear adapter: weight (p_out, p_in), bias (p_out)."""

    def __init__(self, p_in: int, p_out: int, name: str,
                 scheme: str = "seeded_uniform", seed: int = 0, dtype=np.float32):
        if name not in PROJECTION_NAMES:
            raise ArgumentError(f"projection name must be one of {PROJECTION_NAMES}, got {name!r}")
        if scheme not in SCHEMES:
            raise ArgumentError(f"init scheme must be one of {SCHEMES}, got {scheme!r}")
        if p_in <= 0 or p_out <= 0:
            raise ShapeError(f"projection dims must be positive, got {p_in} -> {p_out}")
        self.name = name
        self.scheme = scheme
        if scheme == "identity_padded":
            # np.eye pads rectangular shapes with zeros; exact identity only
            # when p_in == p_out.
            self.linear = Linear(p_in, p_out, name=name, dtype=dtype, init="identity")
        else:
            rng = derived_rng(seed, f"init:{name}")
            self.linear = Linear(p_in, p_out, rng=rng, name=name, dtype=dtype, init="uniform")

    @property
    def p_in(self) -> int:
        return self.linear.in_dim

    @property
    def p_out(self) -> int:
        return self.linear.out_dim

    @property
    def weight(self):
        return self.linear.weight

    @property
    def bias(self):
        return self.linear.bias

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.params())

    def params(self):
        return self.linear.params()

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.linear.forward(x)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return self.linear.backward(dout)


def init_projection(p_in: int, p_out: int, scheme: str, seed: int = 0,
                    name: str = "visual_proj") -> ProjectionParams:
    """Deterministic in (scheme, seed): same call, same bytes."""
    return ProjectionParams(p_in, p_out, name, scheme=scheme, seed=seed)


def project(x, params: ProjectionParams) -> np.ndarray:
    """weight @ x + bias for a single vector or a batch of rows."""
    values = x.values if isinstance(x, FeatureVector) else np.asarray(x)
    if values.shape[-1] != params.p_in:
        raise ShapeError(f"{params.name} expects length {params.p_in}, got {values.shape[-1]}")
    return values @ params.weight.value.T + params.bias.value


def set_frozen(params: ProjectionParams, flag: bool) -> ProjectionParams:
    """Frozen projections keep their bytes through any optimizer steps."""
    params.set_frozen(flag)
    return params
