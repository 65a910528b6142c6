"""Training loss and 3D pose evaluation protocols.

All pose math runs in meters; millimeters appear only at the reporting
boundary. The loss runs on the autodiff tape; the evaluation metrics are
plain numpy.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

__all__ = [
    "pose_loss", "mpjpe", "per_joint_error_mm", "p_mpjpe", "procrustes_align",
    "pck_auc", "AUC_THRESHOLDS_MM", "EvalReport",
]

# PCK threshold sweep for AUC: 5 mm steps from 5 to 150 inclusive (30 points)
AUC_THRESHOLDS_MM = tuple(range(5, 151, 5))


def pose_loss(pred, target, alpha=1.0, beta=0.1):
    """Weighted sum of per-joint L2 and L1 errors, summed over joints, batch-averaged.

    Both error terms use the zero-subgradient convention at a perfect
    prediction, so the gradient stays bounded everywhere.
    """
    pred = T.as_tensor(pred)
    target = T.as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise T.ShapeError(f"pose_loss shapes differ: {pred.shape} vs {target.shape}")
    if alpha < 0 or beta < 0:
        raise ValueError("alpha and beta must be nonnegative")
    diff = T.sub(pred, target)
    l2 = T.tsum(T.l2norm(diff, axis=-1), axis=-1)          # (B,)
    l1 = T.tsum(T.tsum(T.absolute(diff), axis=-1), axis=-1)
    per_sample = T.add(T.scale(l2, alpha), T.scale(l1, beta))
    return T.mean(per_sample)


def _check_pose_shapes(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.shape[-1] != 3:
        raise ValueError(f"pose arrays must share a (..., N, 3) shape: {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    return pred, target


def mpjpe(pred, target):
    """Mean per-joint position error in millimeters."""
    pred, target = _check_pose_shapes(pred, target)
    return float(np.linalg.norm(pred - target, axis=-1).mean() * 1000.0)


def per_joint_error_mm(pred, target):
    """Per-joint mean Euclidean error in millimeters (length-N vector)."""
    pred, target = _check_pose_shapes(pred, target)
    return np.linalg.norm(pred - target, axis=-1).mean(axis=0) * 1000.0


def procrustes_align(pred, target):
    """Best similarity transform (scale, proper rotation, translation) of one pose.

    Returns (aligned_pred, degenerate). A pose whose joints are all coincident
    cannot be aligned; it is returned untouched with degenerate=True.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mu_p = pred.mean(axis=0, keepdims=True)
    mu_t = target.mean(axis=0, keepdims=True)
    p0 = pred - mu_p
    t0 = target - mu_t
    norm_p = np.sqrt((p0 ** 2).sum())
    norm_t = np.sqrt((t0 ** 2).sum())
    if norm_p == 0.0 or norm_t == 0.0:
        return pred.copy(), True
    p0 /= norm_p
    t0 /= norm_t
    u, s, vt = np.linalg.svd(t0.T @ p0)
    # flip the smallest singular direction if needed so det(R) = +1 (no reflection)
    sign = np.sign(np.linalg.det(u @ vt))
    u[:, -1] *= sign
    s[-1] *= sign
    rot = u @ vt
    scale = s.sum() * norm_t / norm_p
    aligned = scale * (pred - mu_p) @ rot.T + mu_t
    return aligned, False


def p_mpjpe(pred, target):
    """MPJPE after per-sample Procrustes alignment, in millimeters."""
    pred, target = _check_pose_shapes(pred, target)
    errors = np.empty(pred.shape[0])
    for i in range(pred.shape[0]):
        aligned, degenerate = procrustes_align(pred[i], target[i])
        if degenerate:
            warnings.warn("degenerate pose: Procrustes alignment skipped, plain error used")
        errors[i] = np.linalg.norm(aligned - target[i], axis=-1).mean()
    return float(errors.mean() * 1000.0)


def pck_auc(pred, target, pck_threshold_mm=150.0, auc_thresholds_mm=AUC_THRESHOLDS_MM):
    """PCK at a threshold plus AUC over the threshold sweep.

    A joint counts as correct when its error is strictly below the threshold;
    AUC is the mean PCK over the sweep.
    """
    if pck_threshold_mm <= 0 or any(t <= 0 for t in auc_thresholds_mm):
        raise ValueError("thresholds must be positive")
    pred, target = _check_pose_shapes(pred, target)
    err_mm = np.linalg.norm(pred - target, axis=-1).ravel() * 1000.0
    pck = float((err_mm < pck_threshold_mm).mean())
    auc = float(np.mean([(err_mm < t).mean() for t in auc_thresholds_mm]))
    return pck, auc


@dataclass
class EvalReport:
    """Evaluation protocol results for one dataset split."""

    mpjpe_mm: float
    p_mpjpe_mm: float
    per_joint_mm: np.ndarray
    pck_150: float
    auc: float
    per_action: dict | None = None

    def validate(self):
        if self.mpjpe_mm < 0 or self.p_mpjpe_mm < 0 or (np.asarray(self.per_joint_mm) < 0).any():
            raise ValueError("errors must be nonnegative")
        if not (0.0 <= self.pck_150 <= 1.0 and 0.0 <= self.auc <= 1.0):
            raise ValueError("pck/auc must lie in [0, 1]")
        return self

    def to_json(self):
        doc = {
            "mpjpe_mm": self.mpjpe_mm,
            "p_mpjpe_mm": self.p_mpjpe_mm,
            "per_joint_mm": [float(v) for v in np.asarray(self.per_joint_mm)],
            "pck_150": self.pck_150,
            "auc": self.auc,
        }
        if self.per_action is not None:
            doc["per_action"] = {k: float(v) for k, v in sorted(self.per_action.items())}
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(
            mpjpe_mm=doc["mpjpe_mm"],
            p_mpjpe_mm=doc["p_mpjpe_mm"],
            per_joint_mm=np.asarray(doc["per_joint_mm"], dtype=np.float64),
            pck_150=doc["pck_150"],
            auc=doc["auc"],
            per_action=doc.get("per_action"),
        )
