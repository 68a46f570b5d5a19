"""Offline Principal Components' Pursuit by the inexact augmented Lagrangian method."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class PCPProblem:
    M: np.ndarray
    lam: float | None = None
    tol: float = 1e-7
    max_iter: int = 500

    def __post_init__(self):
        self.M = np.asarray(self.M, float)
        if self.M.ndim != 2 or not np.all(np.isfinite(self.M)):
            raise ValueError("M must be a finite 2-D array")
        if self.lam is None:
            self.lam = 1.0 / np.sqrt(max(self.M.shape))
        if self.lam <= 0:
            raise ValueError("lambda must be positive")


@dataclass
class PCPReport:
    iterations: int
    converged: bool
    residual: float
    objective: list = field(default_factory=list)
    residuals: list = field(default_factory=list)


def shrink(X, tau):
    return np.sign(X) * np.maximum(np.abs(X) - tau, 0.0)


def svt(X, tau):
    """Singular value thresholding: the prox of ``tau * ||.||_*``."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    k = int(np.count_nonzero(s))
    return (U[:, :k] * s[:k]) @ Vt[:k], k


def solve_pcp(problem: PCPProblem, mu_growth: float = 1.5, mu_init_scale: float = 1.25):
    """Return ``(L, S, report)`` with ``L + S`` approximately ``M``."""
    M, lam, tol = problem.M, problem.lam, problem.tol
    normM = np.linalg.norm(M, "fro")
    if normM == 0.0:
        return np.zeros_like(M), np.zeros_like(M), PCPReport(0, True, 0.0)
    spec = np.linalg.norm(M, 2)
    Y = M / max(spec, np.max(np.abs(M)) / lam)
    mu = mu_init_scale / spec
    mu_max = mu * 1e7
    L = np.zeros_like(M)
    S = np.zeros_like(M)
    rep = PCPReport(0, False, np.inf)
    for it in range(1, problem.max_iter + 1):
        S = shrink(M - L + Y / mu, lam / mu)
        L, _ = svt(M - S + Y / mu, 1.0 / mu)
        Z = M - L - S
        Y = Y + mu * Z
        mu = min(mu * mu_growth, mu_max)
        res = np.linalg.norm(Z, "fro") / normM
        rep.residuals.append(res)
        rep.objective.append(nuclear_norm(L) + lam * np.abs(S).sum())
        rep.iterations = it
        rep.residual = res
        if res < tol:
            rep.converged = True
            break
    return L, S, rep


def nuclear_norm(X) -> float:
    return float(np.linalg.svd(X, compute_uv=False).sum())


def per_frame_errors(L, S, truth, converged: bool = True) -> list:
    """Column-wise error rows for a batch estimate, in the online metrics schema.

    PCP has no support prediction, so the predicted-support columns stay empty;
    the updated support is the nonzero pattern of ``S``.
    """
    from .pipeline import MetricsRow

    L = np.asarray(L, float)
    S = np.asarray(S, float)
    if L.shape != truth.L.shape or S.shape != truth.S.shape:
        raise ValueError(f"estimates of shape {L.shape}/{S.shape} do not align with "
                         f"ground truth {truth.S.shape}")
    err_S = np.linalg.norm(S - truth.S, axis=0)
    ref_S = np.linalg.norm(truth.S, axis=0)
    err_L = np.linalg.norm(L - truth.L, axis=0)
    ref_L = np.linalg.norm(truth.L, axis=0)
    est = S != 0
    extras = np.count_nonzero(est & ~truth.support, axis=0)
    misses = np.count_nonzero(truth.support & ~est, axis=0)
    rows = []
    for k in range(S.shape[1]):
        zero = ref_S[k] == 0
        rows.append(MetricsRow(
            frame=k + 1,
            rel_err_S=float(err_S[k]) if zero else float(err_S[k] / ref_S[k]),
            extras_pred=None, misses_pred=None,
            extras_upd=int(extras[k]), misses_upd=int(misses[k]),
            rel_err_L=float(err_L[k]) if ref_L[k] == 0 else float(err_L[k] / ref_L[k]),
            rank=None, solver_iters=None, epsilon=None, s_zero=bool(zero),
            converged=converged))
    return rows


def run_pcp(data, problem_kwargs=None):
    """Batch PCP on a whole sequence, packaged like the online runs.

    The background estimate is reported as ``M - S`` so the two parts add up
    to the data frame by frame.
    """
    from .pipeline import RunResult, conserve

    L, S, rep = solve_pcp(PCPProblem(data.M, **(problem_kwargs or {})))
    L, S = conserve(data.M, S)
    rows = per_frame_errors(L, S, data.truth, rep.converged) if data.truth is not None else []
    res = RunResult("pcp", rows, S, L, np.where(S != 0, data.M, 0.0), S != 0, None)
    rank = int(np.linalg.matrix_rank(L))
    res.ranks = [rank] * data.M.shape[1]
    for r in rows:
        r.rank = rank
    return res, rep
