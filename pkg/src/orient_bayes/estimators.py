"""Posterior weights over candidate rotations and the MAP / MMSE estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import forward, so3

# Below this Frobenius norm the posterior-averaged matrix has no usable
# direction and the Procrustes rounding is essentially arbitrary.
DEGENERATE_NORM = 1e-9


class DimensionMismatchError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSet:
    """L candidate rotations with precomputed templates x_l = Pi(g_l^-1 . vbar).

    Templates are computed once and shared read-only across observations;
    both estimators then cost O(L d) per observation.
    """

    rotations: np.ndarray  # (L, 3, 3)
    templates: np.ndarray  # (L, d)
    prior: so3.RotationPrior
    seed: int | None = None

    def __post_init__(self):
        if self.rotations.shape[0] != self.templates.shape[0]:
            raise ValueError("rotations and templates must have equal length")

    @property
    def size(self) -> int:
        return self.rotations.shape[0]

    @property
    def dim(self) -> int:
        return self.templates.shape[1]

    @classmethod
    def build(
        cls,
        vbar: np.ndarray,
        prior: so3.RotationPrior,
        count: int,
        seed: int,
        projected: bool = False,
        method: str = "trilinear",
    ) -> "CandidateSet":
        rng = np.random.default_rng([seed, 0xCA4D])
        rotations = prior.sample(rng, count)
        templates = np.empty((count, vbar.size if not projected else vbar.shape[0] ** 2))
        for i, g in enumerate(rotations):
            clean = forward.rotate_volume(vbar, g, method=method)
            if projected:
                clean = forward.project_z(clean)
            templates[i] = clean.ravel()
        return cls(rotations=rotations, templates=templates, prior=prior, seed=seed)


@dataclass(frozen=True)
class PosteriorWeights:
    log_w: np.ndarray  # normalized log-probabilities
    w: np.ndarray

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / np.sum(self.w**2))


@dataclass(frozen=True)
class EstimateReport:
    rotation: np.ndarray
    map_index: int | None = None
    effective_sample_size: float | None = None
    procrustes_nonunique: bool = False
    degenerate_average: bool = False


def _check_dim(y: np.ndarray, cands: CandidateSet) -> np.ndarray:
    y = np.asarray(y, dtype=float).ravel()
    if y.size != cands.dim:
        raise DimensionMismatchError(f"observation dim {y.size} != template dim {cands.dim}")
    return y


def normalized_log_weights(ys: np.ndarray, x: np.ndarray, var) -> np.ndarray:
    """Normalized log posterior weights against a template matrix, (M, L).

    log w_l = -1/2 sum_i (y_i - x_li)^2 / var_i, max-subtracted before
    exponentiation so the weights stay finite for any sigma.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if ys.shape[1] != x.shape[1]:
        raise DimensionMismatchError(f"observation dim {ys.shape[1]} != template dim {x.shape[1]}")
    var = np.asarray(var, dtype=float)
    if np.all(var == 0):
        raise ZeroVarianceError("all effective variances are zero")
    if var.ndim == 0:
        # scalar variance: expand the residual through a single matmul
        y_sq = np.einsum("md,md->m", ys, ys)
        x_sq = np.einsum("ld,ld->l", x, x)
        cross = ys @ x.T
        log_w = -(y_sq[:, None] - 2.0 * cross + x_sq[None, :]) / (2.0 * var)
    else:
        inv = 1.0 / var
        y_sq = (ys**2) @ inv
        x_sq = (x**2) @ inv
        cross = (ys * inv) @ x.T
        log_w = -0.5 * (y_sq[:, None] - 2.0 * cross + x_sq[None, :])
    log_w -= log_w.max(axis=1, keepdims=True)
    log_w -= np.log(np.sum(np.exp(log_w), axis=1, keepdims=True))
    return log_w


def log_weights_batch(ys: np.ndarray, cands: CandidateSet, noise: forward.NoiseModel) -> np.ndarray:
    """Posterior log-weights of a batch of observations against a candidate set."""
    return normalized_log_weights(ys, cands.templates, noise.effective_variance(cands.dim))


def posterior_weights(y, cands: CandidateSet, noise: forward.NoiseModel) -> PosteriorWeights:
    y = _check_dim(y, cands)
    log_w = log_weights_batch(y[None, :], cands, noise)[0]
    return PosteriorWeights(log_w=log_w, w=np.exp(log_w))


def map_indices_batch(ys: np.ndarray, cands: CandidateSet) -> np.ndarray:
    """Argmin_l ||y - x_l||^2 per observation; ties resolve to the lowest index."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if ys.shape[1] != cands.dim:
        raise DimensionMismatchError(f"observation dim {ys.shape[1]} != template dim {cands.dim}")
    x = cands.templates
    x_sq = np.einsum("ld,ld->l", x, x)
    resid = x_sq[None, :] - 2.0 * (ys @ x.T)  # ||y||^2 omitted: constant per row
    return np.argmin(resid, axis=1)


def map_estimate(y, cands: CandidateSet) -> EstimateReport:
    y = _check_dim(y, cands)
    idx = int(map_indices_batch(y[None, :], cands)[0])
    return EstimateReport(rotation=cands.rotations[idx].copy(), map_index=idx)


def mmse_raw_average(weights: PosteriorWeights | np.ndarray, cands: CandidateSet) -> np.ndarray:
    """Posterior-weighted average sum_l w_l g_l, a 3x3 matrix (not a rotation)."""
    w = weights.w if isinstance(weights, PosteriorWeights) else np.asarray(weights, dtype=float)
    if w.shape[0] != cands.size:
        raise DimensionMismatchError("weight length does not match candidate count")
    return np.tensordot(w, cands.rotations, axes=1)


def mmse_estimate(y, cands: CandidateSet, noise: forward.NoiseModel) -> EstimateReport:
    """Procrustes-rounded posterior mean rotation, with degeneracy diagnostics."""
    y = _check_dim(y, cands)
    weights = posterior_weights(y, cands, noise)
    avg = mmse_raw_average(weights, cands)
    degenerate = bool(np.linalg.norm(avg) < DEGENERATE_NORM)
    proj = so3.procrustes_project(avg)
    return EstimateReport(
        rotation=proj.rotation,
        effective_sample_size=weights.effective_sample_size,
        procrustes_nonunique=proj.nonunique,
        degenerate_average=degenerate,
    )


def mmse_rotations_batch(
    ys: np.ndarray, cands: CandidateSet, noise: forward.NoiseModel
) -> np.ndarray:
    """Batched MMSE: posterior-average each observation, then Procrustes-round."""
    log_w = log_weights_batch(ys, cands, noise)
    avg = np.exp(log_w) @ cands.rotations.reshape(cands.size, 9)
    return so3.procrustes_project_batch(avg.reshape(-1, 3, 3))


def mmse_so2_angle(weights: PosteriorWeights | np.ndarray, angles: np.ndarray) -> float:
    """Circular mean of candidate angles, the exact 2x2 Procrustes rounding."""
    w = weights.w if isinstance(weights, PosteriorWeights) else np.asarray(weights, dtype=float)
    angles = np.asarray(angles, dtype=float)
    if w.shape != angles.shape:
        raise DimensionMismatchError("weights and angles must have equal length")
    s = float(np.sum(w * np.sin(angles)))
    c = float(np.sum(w * np.cos(angles)))
    if np.hypot(s, c) < DEGENERATE_NORM:
        raise so3.DegenerateAverageError("averaged direction has near-zero resultant")
    return float(np.arctan2(s, c))
