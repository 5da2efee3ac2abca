"""Iterative reconstruction with soft, MMSE-aligned, and hard assignment.

The reconstruction model has no projection: each observation is a rotated
(or, on the polar grid, cyclically shifted) copy of the structure plus
noise.  The polar group action is an exact shift, so the polar paths are
interpolation-free; the 3D paths back-rotate by grid interpolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import estimators, forward, so3

ASSIGNMENTS = ("soft_em", "mmse_align", "hard_map")


class ZeroVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class ReconstructionConfig:
    assignment: str = "soft_em"
    max_iters: int = 100
    rel_tol: float = 1e-4
    method: str = "trilinear"

    def __post_init__(self):
        if self.assignment not in ASSIGNMENTS:
            raise ValueError(f"unknown assignment mode: {self.assignment!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")


def pcc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson cross-correlation over all coordinates, in [-1, 1]."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise estimators.DimensionMismatchError("shapes differ")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroVarianceError("pcc is undefined for a constant input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def _obs_matrix(obs, d: int) -> np.ndarray:
    if isinstance(obs, np.ndarray):
        mat = np.atleast_2d(np.asarray(obs, dtype=float))
    else:
        mat = np.stack([np.asarray(o.data, dtype=float).ravel() for o in obs])
    if mat.shape[1] != d:
        raise estimators.DimensionMismatchError(
            f"observation dim {mat.shape[1]} != structure dim {d}"
        )
    return mat


def _polar_templates(v_t: np.ndarray) -> np.ndarray:
    """Template matrix of all angular shifts, row s = (s^-1 . v_t) flattened."""
    l_ang = v_t.shape[1]
    return np.stack([forward.rotate_polar(v_t, -s).ravel() for s in range(l_ang)])


def _volume_templates(v_t: np.ndarray, rotations: np.ndarray, method: str) -> np.ndarray:
    return np.stack(
        [forward.rotate_volume(v_t, g, method=method).ravel() for g in rotations]
    )


def _shift_average(ys: np.ndarray, shifts: np.ndarray, shape) -> np.ndarray:
    """Mean of per-observation shifted copies, grouped by shift for speed."""
    out = np.zeros(shape)
    for s in np.unique(shifts):
        group = ys[shifts == s].sum(axis=0).reshape(shape)
        out += forward.rotate_polar(group, int(s))
    return out / ys.shape[0]


def _rotation_average(
    ys: np.ndarray, rotations: np.ndarray, shape, method: str
) -> np.ndarray:
    """Mean of per-observation back-rotated copies: (1/M) sum_i g_i . y_i."""
    out = np.zeros(shape)
    for y, g in zip(ys, rotations):
        out += forward.rotate_volume(y.reshape(shape), g.T, method=method)
    return out / ys.shape[0]


def _weights(ys, templates, noise):
    log_w = estimators.normalized_log_weights(
        ys, templates, noise.effective_variance(templates.shape[1])
    )
    return np.exp(log_w)


def em_step_soft(obs, v_t, cands, noise, method: str = "trilinear") -> np.ndarray:
    """One soft-assignment (EM) update: weight-averaged back-aligned copies."""
    v_t = np.asarray(v_t, dtype=float)
    ys = _obs_matrix(obs, v_t.size)
    if v_t.ndim == 2:
        w = _weights(ys, _polar_templates(v_t), noise)
        colsum = w.T @ ys  # (L, d): weighted observation sum per candidate shift
        out = np.zeros_like(v_t)
        for s in range(v_t.shape[1]):
            out += forward.rotate_polar(colsum[s].reshape(v_t.shape), s)
        return out / ys.shape[0]
    rotations = cands.rotations
    w = _weights(ys, _volume_templates(v_t, rotations, method), noise)
    colsum = w.T @ ys
    out = np.zeros_like(v_t)
    for ell in range(rotations.shape[0]):
        # the group action is linear in the volume, so the weighted sum can
        # be rotated once per candidate instead of once per observation
        out += forward.rotate_volume(colsum[ell].reshape(v_t.shape), rotations[ell].T, method=method)
    return out / ys.shape[0]


def em_step_mmse(obs, v_t, cands, noise, method: str = "trilinear") -> np.ndarray:
    """One MMSE-alignment update: back-rotate each observation by its
    Procrustes-rounded posterior-mean rotation against v_t, then average.

    On the polar grid the circular-mean angle is rounded to the nearest
    grid shift so the action stays exact.
    """
    v_t = np.asarray(v_t, dtype=float)
    ys = _obs_matrix(obs, v_t.size)
    if v_t.ndim == 2:
        l_ang = v_t.shape[1]
        w = _weights(ys, _polar_templates(v_t), noise)
        angles = 2.0 * np.pi * np.arange(l_ang) / l_ang
        mean_angle = np.arctan2(w @ np.sin(angles), w @ np.cos(angles))
        shifts = np.round(mean_angle * l_ang / (2.0 * np.pi)).astype(int) % l_ang
        return _shift_average(ys, shifts, v_t.shape)
    rotations = cands.rotations
    w = _weights(ys, _volume_templates(v_t, rotations, method), noise)
    avg = w @ rotations.reshape(rotations.shape[0], 9)
    aligned = so3.procrustes_project_batch(avg.reshape(-1, 3, 3))
    return _rotation_average(ys, aligned, v_t.shape, method)


def hard_step(obs, v_t, cands, noise, method: str = "trilinear") -> np.ndarray:
    """One hard-assignment update: back-rotate each observation by its MAP
    candidate against v_t, then average."""
    v_t = np.asarray(v_t, dtype=float)
    ys = _obs_matrix(obs, v_t.size)
    if v_t.ndim == 2:
        x = _polar_templates(v_t)
        x_sq = np.einsum("ld,ld->l", x, x)
        shifts = np.argmin(x_sq[None, :] - 2.0 * (ys @ x.T), axis=1)
        return _shift_average(ys, shifts, v_t.shape)
    rotations = cands.rotations
    x = _volume_templates(v_t, rotations, method)
    x_sq = np.einsum("ld,ld->l", x, x)
    idx = np.argmin(x_sq[None, :] - 2.0 * (ys @ x.T), axis=1)
    out = np.zeros_like(v_t)
    for ell in np.unique(idx):
        group = ys[idx == ell].sum(axis=0).reshape(v_t.shape)
        out += forward.rotate_volume(group, rotations[ell].T, method=method)
    return out / ys.shape[0]


_STEPS = {"soft_em": em_step_soft, "mmse_align": em_step_mmse, "hard_map": hard_step}


def run_reconstruction(
    obs,
    v0: np.ndarray,
    cands,
    noise,
    cfg: ReconstructionConfig,
    truth: np.ndarray | None = None,
):
    """Iterate the configured step until the relative change drops below
    cfg.rel_tol or cfg.max_iters is reached.

    Returns the final estimate and a per-iteration trace (iter, rel_change,
    pcc_truth, pcc_template).
    """
    step = _STEPS[cfg.assignment]
    v = np.asarray(v0, dtype=float).copy()
    template = v.copy()
    trace = []
    for it in range(cfg.max_iters):
        v_next = step(obs, v, cands, noise, method=cfg.method)
        prev_norm = np.linalg.norm(v)
        rel = float(np.linalg.norm(v_next - v) / prev_norm) if prev_norm > 0 else float("inf")
        record = {
            "iter": it,
            "rel_change": rel,
            "pcc_truth": _safe_pcc(v_next, truth),
            "pcc_template": _safe_pcc(v_next, template),
        }
        trace.append(record)
        v = v_next
        if rel < cfg.rel_tol:
            break
    return v, trace


def _safe_pcc(a, b):
    if b is None:
        return None
    try:
        return pcc(a, b)
    except ZeroVarianceError:
        return None


def write_trace(path, trace) -> None:
    """One JSON object per iteration, one per line."""
    with open(path, "w") as fh:
        for record in trace:
            fh.write(json.dumps(record) + "\n")
