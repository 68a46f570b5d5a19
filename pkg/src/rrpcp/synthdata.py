"""Synthetic scenes: AR low-rank background overlaid with moving rigid blocks.

Frames are indexed t = 1..horizon; arrays store frame t at column ``t - 1``.
Images are vectorized in C order (row-major), so pixel (row, col) of an
``(H, W)`` image has linear index ``row * W + col``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


F_MOTION = np.array([[1.0, 1.0], [0.0, 1.0]])


@dataclass(frozen=True)
class ScheduleEvent:
    time: int
    add: tuple[int, ...] = ()
    decay: tuple[int, ...] = ()


@dataclass(frozen=True)
class BackgroundModel:
    """Orthonormal direction bank plus the rules that drive its coefficients.

    ``initial`` lists the directions active from the first frame; ``schedule``
    adds new directions (which ramp up from ``initial_fraction`` of their
    stationary stddev over ``growth_frames``) and starts exponential decay of
    existing ones (multiplied by ``decay_rate`` each frame).
    """

    U: np.ndarray
    initial: tuple[int, ...]
    schedule: tuple[ScheduleEvent, ...] = ()
    f: float = 0.95
    stationary_stddevs: np.ndarray | None = None
    growth_frames: int = 20
    initial_fraction: float = 0.1
    decay_rate: float = 0.9

    def __post_init__(self):
        m = self.U.shape[1]
        if self.stationary_stddevs is None:
            object.__setattr__(self, "stationary_stddevs", np.ones(m))
        sd = np.broadcast_to(np.asarray(self.stationary_stddevs, float), (m,)).copy()
        object.__setattr__(self, "stationary_stddevs", sd)
        if not 0.0 <= self.f < 1.0:
            raise ValueError(f"AR coefficient f must lie in [0, 1), got {self.f}")
        if np.any(sd <= 0):
            raise ValueError("stationary stddevs must be positive")
        if not 0.0 < self.decay_rate < 1.0:
            raise ValueError("decay_rate must lie in (0, 1)")
        idx = list(self.initial)
        for ev in self.schedule:
            idx.extend(ev.add)
            idx.extend(ev.decay)
        bad = [i for i in idx if not 0 <= i < m]
        if bad:
            raise ValueError(f"schedule references direction indices out of range [0, {m}): {bad}")

    @property
    def n(self) -> int:
        return self.U.shape[0]

    def active_set(self, t: int) -> list[int]:
        """Indices of directions with nonzero coefficient at frame ``t``."""
        active = set(self.initial)
        for ev in self.schedule:
            if ev.time <= t:
                active.update(ev.add)
        return sorted(active)


@dataclass(frozen=True)
class ObjectSpec:
    half_width: int
    intensity: float
    position: tuple[float, ...]
    velocity: tuple[float, ...]
    accel_variance: float = 0.0
    # per-axis [lo, hi] range for the (real) centre; motion reflects off it
    bounds: tuple[tuple[float, float], ...] | None = None

    def centre_bounds(self, image_dims) -> list[tuple[float, float]]:
        w = self.half_width
        full = [(float(w), float(d - 1 - w)) for d in image_dims]
        if self.bounds is None:
            return full
        return [(max(lo, flo), min(hi, fhi)) for (lo, hi), (flo, fhi) in zip(self.bounds, full)]


@dataclass
class Foreground:
    O: np.ndarray                 # (n, horizon)
    support: np.ndarray           # (n, horizon) bool
    states: np.ndarray            # (n_objects, ndim, horizon, 2): (p, v) per axis
    accels: np.ndarray            # (n_objects, ndim, horizon)


@dataclass
class GroundTruth:
    L: np.ndarray
    O: np.ndarray
    S: np.ndarray
    support: np.ndarray
    states: np.ndarray | None = None


@dataclass
class FrameSequence:
    M: np.ndarray                 # (n, horizon)
    image_dims: tuple[int, ...]
    truth: GroundTruth | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def horizon(self) -> int:
        return self.M.shape[1]


def random_orthonormal(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    if m > n:
        raise ValueError(f"cannot build {m} orthonormal directions in dimension {n}")
    if m == 0:
        return np.zeros((n, 0))
    Q, R = np.linalg.qr(rng.standard_normal((n, m)))
    # fix the sign ambiguity of QR so the draw is Haar-distributed
    return Q * np.sign(np.diag(R))


def gen_background(model: BackgroundModel, horizon: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Simulate ``horizon`` frames of background.

    Returns ``(L, x)`` with ``L`` of shape ``(n, horizon)`` and the coefficient
    trace ``x`` of shape ``(m, horizon)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    m = model.U.shape[1]
    f = model.f
    sd = model.stationary_stddevs
    innov_scale = np.sqrt(1.0 - f * f)

    init_draw = rng.standard_normal(m)
    nu = rng.standard_normal((m, horizon))

    never = np.iinfo(np.int64).max
    add_time = np.full(m, never, dtype=np.int64)
    add_time[list(model.initial)] = 1
    decay_time = np.full(m, never, dtype=np.int64)
    for ev in model.schedule:
        for i in ev.add:
            if add_time[i] == never:
                add_time[i] = ev.time
        for i in ev.decay:
            decay_time[i] = ev.time
    ramped = add_time > 1

    x = np.zeros((m, horizon))
    prev = np.zeros(m)
    for k in range(horizon):
        t = k + 1
        active = add_time <= t
        age = np.where(active, t - add_time, 0)
        ramp = np.where(ramped, model.initial_fraction + (1.0 - model.initial_fraction)
                        * np.minimum(age / model.growth_frames, 1.0), 1.0)
        cur = f * prev + ramp * sd * innov_scale * nu[:, k]
        start = active & (age == 0)
        cur[start] = (np.where(ramped, model.initial_fraction, 1.0) * sd * init_draw)[start]
        decaying = active & (t > decay_time)
        cur[decaying] = model.decay_rate * prev[decaying]
        cur[~active] = 0.0
        x[:, k] = cur
        prev = cur
    return model.U @ x, x


def gen_training(model: BackgroundModel, length: int, seed) -> np.ndarray:
    """Background-only frames from the stationary regime of the initial directions."""
    k = len(model.initial)
    if length < max(k, 2):
        raise ValueError(f"training length {length} is smaller than the {k} initial directions")
    stationary = BackgroundModel(
        U=model.U, initial=model.initial, f=model.f,
        stationary_stddevs=model.stationary_stddevs)
    L, _ = gen_background(stationary, length, seed)
    return L


def _truncated_normal(rng: np.random.Generator, var: float, size) -> np.ndarray:
    if var == 0.0:
        return np.zeros(size)
    sd = np.sqrt(var)
    out = rng.standard_normal(size)
    bad = np.abs(out) > 3.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 3.0
    return out * sd


def round_half_up(p):
    return np.floor(np.asarray(p) + 0.5).astype(int)


def block_indices(centre, half_width: int, image_dims) -> np.ndarray:
    """Linear indices of the square of half-width ``half_width`` around ``centre``.

    The centre is rounded to the nearest pixel; the square is clipped to the image.
    """
    ranges = []
    for c, d in zip(np.atleast_1d(centre), image_dims):
        r = int(round_half_up(c))
        lo, hi = max(r - half_width, 0), min(r + half_width, d - 1)
        ranges.append(np.arange(lo, hi + 1))
    grids = np.meshgrid(*ranges, indexing="ij")
    return np.ravel_multi_index(tuple(g.ravel() for g in grids), tuple(image_dims))


def _squares_disjoint(a: ObjectSpec, b: ObjectSpec, image_dims) -> bool:
    gap = a.half_width + b.half_width + 1
    for (alo, ahi), (blo, bhi) in zip(a.centre_bounds(image_dims), b.centre_bounds(image_dims)):
        if blo - ahi >= gap or alo - bhi >= gap:
            return True
    return False


def gen_foreground(objects, image_dims, horizon: int, seed, boundary: str = "reflect") -> Foreground:
    """Move each object with a per-axis constant-velocity model.

    Accelerations are zero-mean Gaussians truncated at three standard
    deviations. With ``boundary="reflect"`` an object reaching its allowed
    centre range bounces (position mirrored, velocity negated); with
    ``"error"`` it raises instead.
    """
    image_dims = tuple(int(d) for d in image_dims)
    ndim = len(image_dims)
    n = int(np.prod(image_dims))
    rng = np.random.default_rng(seed)
    n_obj = len(objects)
    states = np.zeros((n_obj, ndim, horizon, 2))
    accels = np.zeros((n_obj, ndim, horizon))
    O = np.zeros((n, horizon))
    support = np.zeros((n, horizon), dtype=bool)

    labels = [o.intensity for o in objects]
    if not all(np.isfinite(labels)) or len(set(labels)) != len(labels):
        raise ValueError("object intensities must be finite and distinct")
    for j, o in enumerate(objects):
        if len(o.position) != ndim or len(o.velocity) != ndim:
            raise ValueError(f"object {j}: position/velocity must have {ndim} components")
        for a, (lo, hi) in enumerate(o.centre_bounds(image_dims)):
            if lo > hi or not lo <= o.position[a] <= hi:
                raise ValueError(f"object {j} does not fit in the image at t=0 (axis {a})")
    check_overlap = not all(
        _squares_disjoint(objects[i], objects[j], image_dims)
        for i in range(n_obj) for j in range(i + 1, n_obj))

    for j, o in enumerate(objects):
        accels[j] = _truncated_normal(rng, o.accel_variance, (ndim, horizon))

    for j, o in enumerate(objects):
        bounds = o.centre_bounds(image_dims)
        for a in range(ndim):
            g = np.array([o.position[a], o.velocity[a]], dtype=float)
            lo, hi = bounds[a]
            for k in range(horizon):
                g = F_MOTION @ g
                g[1] += accels[j, a, k]
                if not lo <= g[0] <= hi:
                    if boundary != "reflect":
                        raise ValueError(f"object {j} leaves the image at frame {k + 1}")
                    # mirror until inside (a single bounce unless the range is tiny)
                    while not lo <= g[0] <= hi:
                        g[0] = 2 * hi - g[0] if g[0] > hi else 2 * lo - g[0]
                        g[1] = -g[1]
                states[j, a, k] = g

    for k in range(horizon):
        for j, o in enumerate(objects):
            idx = block_indices(states[j, :, k, 0], o.half_width, image_dims)
            if check_overlap and support[idx, k].any():
                raise ValueError(f"object {j} overlaps another object at frame {k + 1}")
            support[idx, k] = True
            O[idx, k] = o.intensity
    return Foreground(O=O, support=support, states=states, accels=accels)


def compose(L: np.ndarray, fg: Foreground, image_dims=None) -> FrameSequence:
    """Overlay the foreground on the background and derive the sparse part."""
    if L.shape != fg.O.shape:
        raise ValueError(f"background shape {L.shape} does not match foreground {fg.O.shape}")
    T = fg.support
    M = np.where(T, fg.O, L)
    S = np.where(T, fg.O - L, 0.0)
    truth = GroundTruth(L=L, O=fg.O, S=S, support=T, states=fg.states)
    dims = tuple(image_dims) if image_dims is not None else (L.shape[0],)
    return FrameSequence(M=M, image_dims=dims, truth=truth)
