"""Causal low-rank/sparse separation loops and their per-frame metrics.

Two online algorithms share one loop:

* ``suppred-modcs``: a Kalman tracker predicts the foreground support, which
  is handed to Modified-CS as known support, refined by Add-LS-Del, and fed
  back to the tracker as a centroid observation.
* ``plain-rrpcp``: the same loop with an empty known support and no tracker.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import sparse, subspace
from .synthdata import FrameSequence, GroundTruth
from .tracker import MotionState, ObjectTracker

log = logging.getLogger(__name__)

ALGORITHMS = ("suppred-modcs", "plain-rrpcp")


@dataclass
class PipelineConfig:
    algorithm: str = "suppred-modcs"
    f: float = 0.95
    energy_fraction: float = 0.9999
    center: bool = False
    # subspace tracking
    tau: int = 10
    buffer_size: int = 20
    forgetting: float = 0.98
    add_threshold: float = 0.05
    delete_threshold: float = 0.01
    max_rank: int | None = None
    # constraint radius
    c_eps: float = 3.0
    eps_floor: float = 1e-6
    eps_smoothing: float = 0.9
    eps_init: float = 1.0
    eps_escalation: float = 4.0
    eps_retries: int = 6
    # Add-LS-Del
    alpha_add_mult: float = 2.0
    alpha_del_mult: float = 4.0
    conditioning_floor: float = 0.1
    # solver
    solver_tol: float = 1e-6
    solver_max_iter: int = 2000
    warm_start: bool = True
    polish_every: int = 25
    # tracker
    q: float = 1e-4
    R: float = 1e-3
    centroid: str = "mean"
    # intensity distance beyond which a support pixel is ignored by the tracker;
    # None means half the smallest gap among the object intensities and zero
    intensity_gate: float | None = None
    kf_init_pos_std: float = 0.5
    kf_init_vel_std: float = 0.02
    kf_init_cov: tuple[float, float] = (1.0, 0.1)
    seed: int = 0
    # replace the predicted support by the true one (diagnostics only)
    oracle_support: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        positive = ("tau", "buffer_size", "forgetting", "c_eps", "eps_floor", "eps_init",
                    "alpha_add_mult", "alpha_del_mult", "conditioning_floor", "solver_tol",
                    "solver_max_iter", "R", "add_threshold", "delete_threshold")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.eps_smoothing < 1:
            raise ValueError("eps_smoothing must lie in [0, 1)")
        self.kf_init_cov = tuple(self.kf_init_cov)

    @classmethod
    def from_dict(cls, d: dict | None, **overrides) -> "PipelineConfig":
        d = dict(d or {})
        d.update(overrides)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown pipeline settings: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kf_init_cov"] = list(self.kf_init_cov)
        return d


@dataclass
class MetricsRow:
    frame: int
    rel_err_S: float
    extras_pred: int | None
    misses_pred: int | None
    extras_upd: int
    misses_upd: int
    rel_err_L: float
    rank: int | None
    solver_iters: int | None
    epsilon: float | None
    s_zero: bool = False
    converged: bool = True


METRIC_COLUMNS = tuple(f.name for f in fields(MetricsRow))


@dataclass
class RunResult:
    algorithm: str
    rows: list[MetricsRow]
    S_hat: np.ndarray
    L_hat: np.ndarray
    O_hat: np.ndarray
    T_upd: np.ndarray                  # (n, H) bool
    T_pred: np.ndarray | None          # (n, H) bool
    tracks: np.ndarray | None = None   # (H, n_obj, ndim, 2) filtered (p, v)
    ranks: list[int] = field(default_factory=list)
    ortho_errors: list[dict] = field(default_factory=list)
    sigma_history: list[np.ndarray] = field(default_factory=list)
    fallbacks: int = 0
    escalations: int = 0

    @property
    def nonconverged_fraction(self) -> float:
        if not self.rows:
            return 0.0
        return sum(not r.converged for r in self.rows) / len(self.rows)


def _rel(err: float, ref: float) -> tuple[float, bool]:
    if ref == 0.0:
        return err, True
    return err / ref, False


def frame_metrics(t, S_hat, S, L_hat, L, T_upd, T_true, T_pred=None, rank=None,
                  iters=None, eps=None, converged=True) -> MetricsRow:
    rel_S, flag = _rel(float(np.linalg.norm(S_hat - S)), float(np.linalg.norm(S)))
    rel_L, _ = _rel(float(np.linalg.norm(L_hat - L)), float(np.linalg.norm(L)))
    T_upd = np.asarray(T_upd, bool)
    T_true = np.asarray(T_true, bool)
    ep = mp = None
    if T_pred is not None:
        T_pred = np.asarray(T_pred, bool)
        ep = int(np.count_nonzero(T_pred & ~T_true))
        mp = int(np.count_nonzero(T_true & ~T_pred))
    return MetricsRow(
        frame=t, rel_err_S=rel_S, extras_pred=ep, misses_pred=mp,
        extras_upd=int(np.count_nonzero(T_upd & ~T_true)),
        misses_upd=int(np.count_nonzero(T_true & ~T_upd)),
        rel_err_L=rel_L, rank=rank, solver_iters=iters, epsilon=eps, s_zero=flag,
        converged=converged)


def compute_metrics(S_hat, L_hat, T_upd, truth: GroundTruth, T_pred=None, ranks=None,
                    iters=None, eps=None, converged=None) -> list[MetricsRow]:
    """Per-frame rows from ``(n, H)`` estimate matrices and the ground truth."""
    H = truth.S.shape[1]
    for name, X in (("S_hat", S_hat), ("L_hat", L_hat), ("T_upd", T_upd)):
        if np.shape(X) != truth.S.shape:
            raise ValueError(f"{name} has shape {np.shape(X)}, ground truth has {truth.S.shape}")
    if T_pred is not None and np.shape(T_pred) != truth.S.shape:
        raise ValueError("T_pred is misaligned with the ground truth")

    def at(seq, k):
        return None if seq is None else seq[k]

    return [frame_metrics(k + 1, S_hat[:, k], truth.S[:, k], L_hat[:, k], truth.L[:, k],
                          T_upd[:, k], truth.support[:, k],
                          None if T_pred is None else T_pred[:, k],
                          at(ranks, k), at(iters, k), at(eps, k),
                          True if converged is None else converged[k])
            for k in range(H)]


def conserve(M, S):
    """Split ``M`` into ``(L, S)`` with ``L + S == M`` in floating point.

    Per entry, the larger of ``S`` and ``M - S`` is moved by at most half an ulp
    onto the grid of ``max(|M|, |part|)`` and the other part is ``M`` minus it,
    which is then an exact subtraction. This fails only where both parts lie in
    a higher binade than ``M`` (they nearly cancel); no representable split
    exists there and the sum is off by one rounding.
    """
    M = np.asarray(M, float)
    S = np.asarray(S, float)
    L0 = M - S
    s_big = np.abs(S) >= np.abs(L0)
    big = np.where(s_big, S, L0)
    g = np.spacing(np.maximum(np.abs(M), np.abs(big)))
    big = np.round(big / g) * g
    small = M - big
    return np.where(s_big, small, big), np.where(s_big, big, small)


def median_rel_err(rows) -> float:
    vals = [r.rel_err_S for r in rows if not r.s_zero]
    return float(np.median(vals)) if vals else math.nan


def _init_tracker(data: FrameSequence, cfg: PipelineConfig):
    objs = data.meta.get("objects")
    if not objs:
        return None
    rng = np.random.default_rng([cfg.seed, 7919])
    ndim = len(data.image_dims)
    states = []
    for o in objs:
        per_axis = []
        for a in range(ndim):
            p = o["position"][a] + cfg.kf_init_pos_std * rng.standard_normal()
            v = o["velocity"][a] + cfg.kf_init_vel_std * rng.standard_normal()
            per_axis.append(MotionState(np.array([p, v]), np.diag(cfg.kf_init_cov).astype(float)))
        states.append(per_axis)
    return ObjectTracker(states, [o["half_width"] for o in objs], [o["intensity"] for o in objs],
                         data.image_dims, q=cfg.q, R=cfg.R, statistic=cfg.centroid,
                         gate=cfg.intensity_gate)


def run_online(data: FrameSequence, sub0: subspace.SubspaceEstimate,
               cfg: PipelineConfig) -> RunResult:
    """Process the frames of ``data`` causally, starting from the training subspace."""
    M = data.M
    n, H = M.shape
    if sub0.n != n:
        raise ValueError(f"subspace dimension {sub0.n} does not match frames of length {n}")
    use_tracker = cfg.algorithm == "suppred-modcs"
    tracker = _init_tracker(data, cfg) if use_tracker else None
    truth = data.truth

    sub = sub0
    L_prev = sub0.mean.copy() if sub0.mean is not None else np.zeros(n)
    buf = deque(maxlen=cfg.buffer_size)
    eps_rule = sparse.EpsilonRule(cfg.c_eps, cfg.eps_floor, cfg.eps_smoothing, cfg.eps_init)
    s_prev = None

    S_hat = np.zeros((n, H))
    L_hat = np.zeros((n, H))
    O_hat = np.zeros((n, H))
    T_upd = np.zeros((n, H), dtype=bool)
    T_pred_all = np.zeros((n, H), dtype=bool) if use_tracker else None
    tracks = None
    if tracker is not None:
        tracks = np.zeros((H, len(tracker.states), len(data.image_dims), 2))
    ranks, iters, epss, conv = [], [], [], []
    result = RunResult(cfg.algorithm, [], S_hat, L_hat, O_hat, T_upd, T_pred_all, tracks)

    for k in range(H):
        t = k + 1
        try:
            # (1) subspace update at the start of the frame when due
            if k > 0 and k % cfg.tau == 0 and buf:
                sub = subspace.update_pc(sub, np.column_stack(buf), cfg.add_threshold,
                                         cfg.delete_threshold, cfg.forgetting, frame=t,
                                         max_rank=cfg.max_rank)
                result.ortho_errors.append(sub.orthogonality_errors())
                result.sigma_history.append(sub.sigma.copy())
            A = sub.A
            # (2) projection and AR noise cancellation
            y = subspace.project(sub, M[:, k])
            y_canc = subspace.cancel_noise(sub, y, L_prev, cfg.f)
            # (3) support prediction, Modified-CS, Add-LS-Del, tracker update
            if tracker is not None:
                tracker.predict()
                T_known, _ = tracker.predicted_support()
                if cfg.oracle_support and truth is not None:
                    T_known = np.flatnonzero(truth.support[:, k])
                T_pred_all[T_known, k] = True
            else:
                T_known = np.zeros(0, dtype=int)
            eps = eps_rule.epsilon(y_canc)
            # an underestimated radius makes Modified-CS fit the noise with a
            # dense vector; widen it and retry until the solve and the LS are sane
            for attempt in range(cfg.eps_retries + 1):
                rep = sparse.solve_modcs(
                    sparse.ModCSProblem(y_canc, A, T_known, eps), tol=cfg.solver_tol,
                    max_iter=cfg.solver_max_iter, polish_every=cfg.polish_every,
                    x0=s_prev if cfg.warm_start else None)
                noise_sd = eps / (cfg.c_eps * math.sqrt(A.shape[0]))
                params = sparse.AddLSDelParams(cfg.alpha_add_mult * noise_sd,
                                               cfg.alpha_del_mult * noise_sd,
                                               cfg.conditioning_floor)
                last = attempt == cfg.eps_retries
                log.debug("frame %d: eps=%.4g converged=%s iters=%d", t, eps, rep.converged,
                          rep.iterations)
                try:
                    T_fin, S_t, _ = sparse.add_ls_del(rep.solution, A, y_canc, T_known, params)
                except sparse.IllConditionedLS as exc:
                    if not last:
                        eps *= cfg.eps_escalation
                        continue
                    log.debug("frame %d: %s; keeping the Modified-CS estimate", t, exc)
                    result.fallbacks += 1
                    S_t = rep.solution.copy()
                    T_fin = np.flatnonzero(np.abs(S_t) > params.alpha_del)
                    S_t[np.setdiff1d(np.arange(n), T_fin)] = 0.0
                    break
                if rep.converged or last:
                    break
                eps *= cfg.eps_escalation
            if attempt:
                result.escalations += 1
                eps_rule.reset_to(eps)
            if tracker is not None:
                tracker.update(T_fin, M[:, k])
                for j, obj in enumerate(tracker.states):
                    for a, st in enumerate(obj):
                        tracks[k, j, a] = st.g
            eps_rule.observe(float(np.linalg.norm(y_canc - A @ S_t)), A.shape[0], len(T_fin))
        except Exception as exc:
            raise RuntimeError(f"{cfg.algorithm} failed at frame {t}: {exc}") from exc

        # (4) feedback
        T_upd[T_fin, k] = True
        O_hat[T_fin, k] = M[T_fin, k]
        L_hat[:, k], S_hat[:, k] = conserve(M[:, k], S_t)
        L_prev = L_hat[:, k]
        buf.append(L_prev.copy())
        s_prev = S_t
        ranks.append(sub.rank)
        iters.append(rep.iterations)
        epss.append(eps)
        conv.append(rep.converged)

    result.ranks = ranks
    if truth is not None:
        result.rows = compute_metrics(S_hat, L_hat, T_upd, truth, T_pred_all, ranks, iters,
                                      epss, conv)
    return result


def run_suppred_modcs(data: FrameSequence, sub0, cfg: PipelineConfig | None = None,
                      **overrides) -> RunResult:
    cfg = PipelineConfig.from_dict(cfg.to_dict() if cfg else None, **overrides,
                                   algorithm="suppred-modcs")
    return run_online(data, sub0, cfg)


def run_plain_rrpcp(data: FrameSequence, sub0, cfg: PipelineConfig | None = None,
                    **overrides) -> RunResult:
    cfg = PipelineConfig.from_dict(cfg.to_dict() if cfg else None, **overrides,
                                   algorithm="plain-rrpcp")
    return run_online(data, sub0, cfg)
