"""Per-object, per-axis constant-velocity Kalman tracking of block centroids."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .synthdata import F_MOTION, round_half_up

log = logging.getLogger(__name__)

H = np.array([1.0, 0.0])


@dataclass(frozen=True)
class MotionState:
    g: np.ndarray      # (position, velocity)
    Sigma: np.ndarray  # 2x2

    @property
    def p(self) -> float:
        return float(self.g[0])


@dataclass(frozen=True)
class CentroidObservation:
    p_obs: float
    valid: bool
    R: float


def _sym(S):
    return 0.5 * (S + S.T)


def kf_predict(state: MotionState, q: float) -> MotionState:
    Q = np.array([[0.0, 0.0], [0.0, q]])
    return MotionState(F_MOTION @ state.g, _sym(F_MOTION @ state.Sigma @ F_MOTION.T + Q))


def kf_update(state: MotionState, obs: CentroidObservation) -> MotionState:
    if not obs.valid:
        return state
    S = state.Sigma
    innov_var = float(H @ S @ H) + obs.R
    if innov_var <= 0:
        raise ValueError(f"innovation variance {innov_var} must be positive (check R)")
    K = S @ H / innov_var
    g = state.g + K * (obs.p_obs - float(H @ state.g))
    Sigma = S - np.outer(K, H @ S)
    return MotionState(g, _sym(Sigma))


def predict_support(centres, widths, image_dims) -> tuple[np.ndarray, bool]:
    """Union of the predicted squares as sorted linear pixel indices.

    ``centres`` is ``(n_objects, ndim)``. Squares are clipped to the image;
    the second return value reports whether any clipping happened.
    """
    image_dims = tuple(image_dims)
    clipped = False
    out = []
    for c, w in zip(np.atleast_2d(centres), widths):
        ranges = []
        for p, d in zip(c, image_dims):
            r = int(round_half_up(p))
            lo, hi = r - w, r + w
            if lo < 0 or hi > d - 1:
                clipped = True
            ranges.append(np.arange(max(lo, 0), min(hi, d - 1) + 1))
        grids = np.meshgrid(*ranges, indexing="ij")
        if all(len(r) for r in ranges):
            out.append(np.ravel_multi_index(tuple(g.ravel() for g in grids), image_dims))
    if clipped:
        log.debug("predicted support clipped at the image border")
    if not out:
        return np.zeros(0, dtype=int), clipped
    return np.unique(np.concatenate(out)), clipped


def default_gate(labels) -> float:
    """Half the smallest gap between object intensities and the zero level."""
    levels = np.unique(np.append(np.asarray(labels, float), 0.0))
    if levels.size < 2:
        return np.inf
    return 0.5 * float(np.min(np.diff(levels)))


def assign_pixels(support, M_t, labels, predicted_centres, image_dims,
                  gate: float = np.inf) -> np.ndarray:
    """Object index for each support pixel: nearest intensity label, ties to
    the nearest predicted centre. Pixels farther than ``gate`` from every
    label get -1."""
    support = np.asarray(support, dtype=int)
    labels = np.asarray(labels, float)
    if support.size == 0:
        return np.zeros(0, dtype=int)
    vals = np.asarray(M_t)[support]
    dist = np.abs(vals[:, None] - labels[None, :])
    best = dist.min(axis=1, keepdims=True)
    tied = np.isclose(dist, best, rtol=0, atol=1e-12)
    coords = np.stack(np.unravel_index(support, tuple(image_dims)), axis=1).astype(float)
    cdist = np.linalg.norm(coords[:, None, :] - np.atleast_2d(predicted_centres)[None], axis=2)
    cdist = np.where(tied, cdist, np.inf)
    owner = np.argmin(cdist, axis=1)
    owner[best[:, 0] > gate] = -1
    return owner


def observe_centroid(support, M_t, labels, predicted_centres, image_dims, R: float = 1e-3,
                     statistic: str = "mean", gate: float = np.inf) -> list[list[CentroidObservation]]:
    """Observed centre per object and axis from the updated support estimate.

    Only pixels whose intensity lies within ``gate`` of some object label take
    part, so stray background pixels in the support do not drag the centre.
    """
    if statistic not in ("mean", "median"):
        raise ValueError("statistic must be 'mean' or 'median'")
    image_dims = tuple(image_dims)
    support = np.asarray(support, dtype=int)
    owner = assign_pixels(support, M_t, labels, predicted_centres, image_dims, gate)
    coords = np.stack(np.unravel_index(support, image_dims), axis=1).astype(float) \
        if support.size else np.zeros((0, len(image_dims)))
    stat = np.mean if statistic == "mean" else np.median
    result = []
    for k in range(len(labels)):
        mine = coords[owner == k]
        if mine.shape[0] == 0:
            result.append([CentroidObservation(np.nan, False, R) for _ in image_dims])
        else:
            result.append([CentroidObservation(float(stat(mine[:, a])), True, R)
                           for a in range(len(image_dims))])
    return result


class ObjectTracker:
    """Bank of independent per-axis Kalman filters, one set per object."""

    def __init__(self, init_states, widths, labels, image_dims, q=1e-4, R=1e-3,
                 statistic="mean", gate=None):
        # init_states: per object, per axis MotionState
        self.states = [list(s) for s in init_states]
        self.widths = list(widths)
        self.labels = list(labels)
        self.image_dims = tuple(image_dims)
        self.q = q
        self.R = R
        self.statistic = statistic
        self.gate = default_gate(labels) if gate is None else float(gate)

    def predict(self):
        self.states = [[kf_predict(s, self.q) for s in obj] for obj in self.states]
        return self.centres()

    def centres(self) -> np.ndarray:
        return np.array([[s.p for s in obj] for obj in self.states]).reshape(
            len(self.states), len(self.image_dims))

    def predicted_support(self):
        return predict_support(self.centres(), self.widths, self.image_dims)

    def update(self, support, M_t):
        obs = observe_centroid(support, M_t, self.labels, self.centres(), self.image_dims,
                               self.R, self.statistic, self.gate)
        self.states = [[kf_update(s, o) for s, o in zip(obj, ob)]
                       for obj, ob in zip(self.states, obs)]
        return obs
