"""Adam over named parameter groups with per-group learning rates.

Cloud parameters and the 7-vector pose are optimized as separate groups.
Quaternions are treated as unconstrained 4-vectors and renormalized after
every step (projected gradient); :func:`normalize_pose_params` performs
the projection for the pose vector.
"""

from __future__ import annotations

import warnings

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Learning-rate conventions; rates marked per-extent are multiplied by the
# object extent (initial cloud bounding-box diagonal) at setup time.
LR_MEANS_PER_EXTENT = 1.6e-3
LR_COLORS = 2.5e-3
LR_OPACITY = 5e-2
LR_LOG_SCALES = 5e-3
LR_ROTATIONS = 1e-3
LR_POSE_TRANSLATION_PER_EXTENT = 1e-3
LR_POSE_ROTATION = 1e-3


def default_cloud_rates(extent: float) -> dict[str, float]:
    return {
        "means": LR_MEANS_PER_EXTENT * extent,
        "log_scales": LR_LOG_SCALES,
        "rotations": LR_ROTATIONS,
        "opacity_logits": LR_OPACITY,
        "colors": LR_COLORS,
    }


def default_pose_rates(extent: float) -> dict[str, float]:
    return {
        "translation": LR_POSE_TRANSLATION_PER_EXTENT * extent,
        "rotation": LR_POSE_ROTATION,
    }


class Adam:
    """Standard bias-corrected Adam over a dict of named parameter arrays."""

    def __init__(self, rates: dict[str, float]):
        self.rates = dict(rates)
        self.beta1 = ADAM_BETA1
        self.beta2 = ADAM_BETA2
        self.eps = ADAM_EPS
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(
        self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        """One update; returns new parameter arrays (inputs untouched).

        A group whose gradient contains non-finite values is skipped for
        this step (its parameters and moments are left unchanged) with a
        warning; the shared step counter still advances.
        """
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        out = {}
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for group '{name}'")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            if not np.all(np.isfinite(g)):
                warnings.warn(f"non-finite gradient in group '{name}'; step skipped")
                out[name] = p.copy()
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            out[name] = p - self.rates[name] * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "rates": dict(self.rates),
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = state["step_count"]
        self.rates = dict(state["rates"])
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


def adam_step(state: Adam, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Single-group convenience wrapper (group name ``params``)."""
    return state.step({"params": params}, {"params": grads})["params"]


def normalize_pose_params(pose_vec: np.ndarray) -> np.ndarray:
    """Renormalize the quaternion part of ``[t, q]``; translation untouched."""
    vec = np.asarray(pose_vec, dtype=np.float64).copy()
    norm = np.linalg.norm(vec[3:7])
    if norm < 1e-12:
        raise ValueError("pose quaternion collapsed to zero")
    vec[3:7] /= norm
    return vec
