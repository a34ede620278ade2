"""Model fusion: barycenter-based weight merging and the arithmetic baseline.

Each layer's flattened weights (and, separately, its biases) are shifted by
their minimum and divided by the post-shift sum, turning them into a
probability vector over their own coordinates. The per-agent vectors are
merged with a Wasserstein barycenter, then rescaled with the agent-averaged
(shift, scale) pair and reshaped.

The shift is a subtraction (``w - min(w)``) so that normalization and the
line-9 rescale are mutual inverses and the normalized vector is a valid
probability vector; constant layers have zero spread and fall back to the
weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError
from .nn import NetworkParams
from .ot import BarycenterWeights, DiscreteDistribution, GroundCost, barycenter_quantile

__all__ = [
    "NormalizationScalars",
    "FusionWeights",
    "DegenerateLayerError",
    "normalize_layer",
    "denormalize",
    "fuse_layer_wb",
    "fuse_wb",
    "fuse_avg",
]

DEGENERATE_SPREAD = 1e-12


class DegenerateLayerError(Exception):
    """Raised when a layer has (near-)zero spread and cannot be normalized."""


@dataclass(frozen=True)
class NormalizationScalars:
    """Per-layer inversion data: ``shift`` = min weight, ``scale`` = post-shift sum."""

    shift: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise DomainError(f"scale must be positive, got {self.scale!r}")


@dataclass(frozen=True)
class FusionWeights:
    """Barycenter weights over agents; defaults to uniform."""

    lam: BarycenterWeights

    @staticmethod
    def uniform(n_agents: int) -> "FusionWeights":
        return FusionWeights(BarycenterWeights.uniform(n_agents))


def normalize_layer(weights: np.ndarray) -> tuple[DiscreteDistribution, NormalizationScalars]:
    """Turn a flat weight vector into a probability vector plus inversion scalars."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size == 0:
        raise DomainError("cannot normalize an empty layer")
    if not np.all(np.isfinite(w)):
        raise DomainError("layer contains non-finite weights")
    shift = float(w.min())
    shifted = w - shift
    scale = float(shifted.sum())
    if scale < DEGENERATE_SPREAD:
        raise DegenerateLayerError(
            f"layer is constant (spread {scale:.3e}); use the mean fallback")
    return DiscreteDistribution(shifted / scale), NormalizationScalars(shift, scale)


def denormalize(dist: DiscreteDistribution, mean_scale: float,
                mean_shift: float) -> np.ndarray:
    """Invert normalization with agent-averaged scalars: ``mass * scale + shift``."""
    if not mean_scale > 0:
        raise DomainError(f"mean scale must be positive, got {mean_scale!r}")
    return dist.mass * mean_scale + mean_shift


def _fusion_lam(all_params, lam: FusionWeights | None) -> BarycenterWeights:
    if lam is None:
        return BarycenterWeights.uniform(len(all_params))
    if len(lam.lam) != len(all_params):
        raise DimensionError(f"{len(lam.lam)} fusion weights for {len(all_params)} agents")
    return lam.lam


def _check_same_shapes(all_params: list[NetworkParams]) -> None:
    if not all_params:
        raise DomainError("need at least one agent")
    ref = all_params[0]
    for k, p in enumerate(all_params[1:], start=1):
        if ([w.shape for w in p.weights] != [w.shape for w in ref.weights]
                or [b.shape for b in p.biases] != [b.shape for b in ref.biases]):
            raise DimensionError(f"agent {k} parameter shapes differ from agent 0")


def fuse_layer_wb(flats: list[np.ndarray], lam: BarycenterWeights,
                  cost: GroundCost, projection: str) -> np.ndarray:
    """Fuse one flattened layer across agents; weighted-mean fallback when constant."""
    try:
        dists, scalars = zip(*(normalize_layer(f) for f in flats))
    except DegenerateLayerError:
        return lam.lam @ np.stack(flats)
    merged = barycenter_quantile(list(dists), lam, cost, projection=projection)
    # Scalars are averaged with the fusion weights (the plain mean for the
    # default uniform weights) so a one-hot weighting reproduces that agent.
    mean_scale = float(lam.lam @ np.array([s.scale for s in scalars]))
    mean_shift = float(lam.lam @ np.array([s.shift for s in scalars]))
    return denormalize(merged, mean_scale, mean_shift)


def fuse_wb(all_params: list[NetworkParams], lam: FusionWeights | None = None,
            cost: GroundCost = GroundCost(), projection: str = "round") -> NetworkParams:
    """Barycenter fusion of agent networks, layer by layer.

    Weights and biases are fused independently; output shapes equal input
    shapes. With one agent this is the identity (up to normalization
    round-trip arithmetic).
    """
    _check_same_shapes(all_params)
    weights_lam = _fusion_lam(all_params, lam)
    out_weights, out_biases = [], []
    for j in range(all_params[0].n_layers):
        shape = all_params[0].weights[j].shape
        fused = fuse_layer_wb([p.weights[j].ravel() for p in all_params],
                              weights_lam, cost, projection)
        out_weights.append(fused.reshape(shape))
        out_biases.append(fuse_layer_wb([p.biases[j] for p in all_params],
                                        weights_lam, cost, projection))
    return NetworkParams(out_weights, out_biases)


def fuse_avg(all_params: list[NetworkParams]) -> NetworkParams:
    """Entrywise arithmetic mean across agents (the FedAvg-style baseline)."""
    _check_same_shapes(all_params)
    n = all_params[0].n_layers
    return NetworkParams(
        [np.mean([p.weights[j] for p in all_params], axis=0) for j in range(n)],
        [np.mean([p.biases[j] for p in all_params], axis=0) for j in range(n)],
    )
