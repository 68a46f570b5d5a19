"""Constrained l1 recovery with partial support knowledge, plus Add-LS-Del.

``solve_modcs`` minimizes ``||s[T^c]||_1`` subject to ``||y - A s||_2 <= eps``.
With an empty ``T`` this is basis pursuit denoising in its constrained form.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve, qr, solve_triangular

log = logging.getLogger(__name__)


class IllConditionedLS(ValueError):
    """The least-squares submatrix of Add-LS-Del is too badly conditioned."""


@dataclass
class ModCSProblem:
    y: np.ndarray
    A: np.ndarray
    T: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    epsilon: float = 0.0

    def __post_init__(self):
        self.y = np.asarray(self.y, float)
        self.A = np.asarray(self.A, float)
        self.T = np.unique(np.asarray(self.T, dtype=int))
        m, n = self.A.shape
        if self.y.shape != (m,):
            raise ValueError(f"y has shape {self.y.shape}, expected ({m},)")
        if self.T.size and (self.T[0] < 0 or self.T[-1] >= n):
            raise ValueError("known support T has indices outside [0, n)")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and >= 0")

    def weights(self) -> np.ndarray:
        w = np.ones(self.A.shape[1])
        w[self.T] = 0.0
        return w

    def objective(self, s) -> float:
        return float(np.sum(np.abs(s) * self.weights()))


@dataclass
class SolverReport:
    solution: np.ndarray
    residual: float
    iterations: int
    converged: bool
    polished: bool = False
    history: list | None = None


def partial_soft_threshold(v: np.ndarray, weights: np.ndarray, thresh: float) -> np.ndarray:
    """Shrink entries with weight 1 by ``thresh``; pass weight-0 entries through."""
    return np.sign(v) * np.maximum(np.abs(v) - thresh * weights, 0.0)


def project_ball(z: np.ndarray, centre: np.ndarray, radius: float) -> np.ndarray:
    d = z - centre
    nd = np.linalg.norm(d)
    if nd <= radius:
        return z
    return centre + d * (radius / nd)


def _feasible(resid: float, eps: float, ynorm: float, tol_feas: float) -> bool:
    return resid <= eps * (1.0 + tol_feas) + 1e-11 * max(ynorm, 1.0)


def _polish(problem: ModCSProblem, s: np.ndarray, tol: float, lam0=None):
    """Solve the optimality conditions on the support of ``s`` and certify.

    Returns the exact minimizer restricted to that support if it passes a
    sign and dual-feasibility check, else ``None``.
    """
    A, y, eps = problem.A, problem.y, problem.epsilon
    m, n = A.shape
    w = problem.weights()
    S = np.flatnonzero((w == 0) | (s != 0))
    if S.size == 0 or S.size > m:
        return None
    AS = A[:, S]
    Q, R = np.linalg.qr(AS)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * max(d.max(), 1e-300):
        return None
    g = np.sign(s[S]) * w[S]
    base = solve_triangular(R, Q.T @ y)
    perp = y - Q @ (Q.T @ y)
    perp_sq = float(perp @ perp)
    slack = (1e-12 * max(float(np.linalg.norm(y)), 1.0)) ** 2
    if perp_sq > eps * eps * (1.0 + 1e-12) + slack:
        return None
    # direction of the l1 pull: G^{-1} g with G = AS'AS = R'R
    Ginv_g = solve_triangular(R, solve_triangular(R, g, trans="T"))
    h = float(g @ Ginv_g)
    inv_mu = np.sqrt(max(eps * eps - perp_sq, 0.0) / h) if h > 0 else 0.0
    sS = base - inv_mu * Ginv_g
    if inv_mu > 0:
        cands = [AS @ Ginv_g + perp / inv_mu]
    else:
        # multiplier not pinned down: try the minimum-norm one and the
        # solver's estimate corrected onto {AS' lam = g}
        cands = [AS @ Ginv_g]
        if lam0 is not None:
            corr = solve_triangular(R, solve_triangular(R, g - AS.T @ lam0, trans="T"))
            cands.append(lam0 + AS @ corr)
    out = np.zeros(n)
    out[S] = sS
    # sign consistency on the unknown part of the support
    on = w[S] > 0
    if np.any(np.sign(sS[on]) != g[on]):
        return None
    # dual feasibility off the support
    off = np.setdiff1d(np.flatnonzero(w > 0), S)
    if off.size == 0:
        return out
    for lam in cands:
        if np.max(np.abs(A[:, off].T @ lam)) <= 1.0 + max(tol, 1e-9):
            return out
    return None


def _try_polish(problem: ModCSProblem, v: np.ndarray, tol: float, lam0=None):
    top = np.max(np.abs(v), initial=0.0)
    # tiny ADMM leftovers can hide the true support; retry with them pruned
    for rel in (0.0, 1e-8, 1e-6, 1e-4):
        p = _polish(problem, np.where(np.abs(v) > rel * top, v, 0.0), tol, lam0)
        if p is not None:
            return p
    return None


def solve_modcs(problem: ModCSProblem, tol: float = 1e-6, max_iter: int = 2000,
                rho: float | None = None, x0: np.ndarray | None = None,
                polish: bool = True, adapt_rho: bool = True, tol_feas: float = 1e-9,
                record: bool = False, polish_every: int = 0) -> SolverReport:
    """ADMM on the split ``v1 = s`` (weighted l1), ``v2 = A s`` (ball constraint).

    The s-update solves ``(I + A'A) s = rhs`` through a Cholesky factor of
    ``I + AA'``, which is independent of the penalty ``rho``; ``rho`` is
    adapted by residual balancing. A converged run is optionally polished by
    solving the optimality conditions on the detected support; with
    ``polish_every`` the same certificate is tried periodically and ends the
    iteration early once it succeeds.
    """
    A, y, eps = problem.A, problem.y, float(problem.epsilon)
    m, n = A.shape
    w = problem.weights()
    ynorm = float(np.linalg.norm(y))
    AAt = A @ A.T
    # rows of a QR complement are orthonormal, so (I + AA')^-1 is just I/2
    orth_rows = np.allclose(AAt, np.eye(m), atol=1e-10)
    chol = None if orth_rows else cho_factor(np.eye(m) + AAt)

    s = np.zeros(n) if x0 is None else np.asarray(x0, float).copy()
    v1 = s.copy()
    v2 = project_ball(A @ s, y, eps)
    d1 = np.zeros(n)
    d2 = np.zeros(m)
    if rho is None:
        rho = 1.0 / max(np.max(np.abs(A.T @ y)), 1e-12) * 10.0
    history = [] if record else None

    # balancing on every step makes ADMM oscillate; adapt sparsely, then freeze
    adapt_every, adapt_until = 25, max(max_iter // 4, 25)
    converged = False
    cert = None
    it = 0
    for it in range(1, max_iter + 1):
        a1, a2 = v1 - d1, v2 - d2
        if orth_rows:
            As = 0.5 * (A @ a1 + a2)
            s = a1 + A.T @ (a2 - As)
        else:
            w_ = a1 + A.T @ a2
            As = cho_solve(chol, A @ w_)
            s = w_ - A.T @ As

        v1_old, v2_old = v1, v2
        v1 = partial_soft_threshold(s + d1, w, 1.0 / rho)
        v2 = project_ball(As + d2, y, eps)
        r1 = s - v1
        r2 = As - v2
        d1 = d1 + r1
        d2 = d2 + r2

        prim = np.sqrt(r1 @ r1 + r2 @ r2)
        dual = rho * np.linalg.norm((v1 - v1_old) + A.T @ (v2 - v2_old))
        if record:
            history.append(dict(s=s.copy(), v1=v1.copy(), v2=v2.copy(), d1=d1.copy(),
                                d2=d2.copy(), rho=rho, prim=prim, dual=dual))
        scale_p = max(np.sqrt(s @ s + As @ As), np.sqrt(v1 @ v1 + v2 @ v2), 1e-300)
        scale_d = max(rho * np.sqrt(d1 @ d1 + d2 @ d2), 1e-300)
        if prim <= tol * scale_p and dual <= tol * scale_d:
            converged = True
            break
        if polish and polish_every and it % polish_every == 0:
            cert = _try_polish(problem, v1, tol, -rho * d2)
            if cert is not None:
                break
        if adapt_rho and it % adapt_every == 0 and it <= adapt_until:
            if prim > 10.0 * dual:
                rho *= 2.0
                d1 /= 2.0
                d2 /= 2.0
            elif dual > 10.0 * prim:
                rho /= 2.0
                d1 *= 2.0
                d2 *= 2.0

    sol = v1
    polished = False
    if polish:
        p = cert if cert is not None else _try_polish(problem, v1, tol, -rho * d2)
        if p is not None:
            sol = p
            polished = True
    resid = float(np.linalg.norm(y - A @ sol))
    if not polished and not _feasible(resid, eps, ynorm, tol_feas):
        # minimum-norm correction onto the constraint set
        target = project_ball(A @ sol, y, eps)
        corr, *_ = np.linalg.lstsq(A, target - A @ sol, rcond=None)
        sol = sol + corr
        resid = float(np.linalg.norm(y - A @ sol))
    ok = (converged or polished) and _feasible(resid, eps, ynorm, tol_feas)
    return SolverReport(solution=sol, residual=resid, iterations=it, converged=ok,
                        polished=polished, history=history)


@dataclass
class AddLSDelParams:
    alpha_add: float
    alpha_del: float
    conditioning_floor: float = 0.1

    def __post_init__(self):
        if self.alpha_add <= 0 or self.alpha_del <= 0 or self.conditioning_floor <= 0:
            raise ValueError("Add-LS-Del thresholds and conditioning floor must be positive")


@dataclass
class AddLSDelReport:
    T_add: np.ndarray
    retried: bool
    ls_residual: float
    min_singular: float


def _ls_on(A: np.ndarray, y: np.ndarray, idx: np.ndarray, floor: float):
    """Least squares on columns ``idx`` via QR; returns (coef, min normalized singular value)."""
    if idx.size == 0:
        return np.zeros(0), np.inf
    if idx.size > A.shape[0]:
        return None, 0.0
    sub = A[:, idx]
    norms = np.linalg.norm(sub, axis=0)
    if np.any(norms == 0):
        return None, 0.0
    smin = float(np.linalg.svd(sub / norms, compute_uv=False)[-1])
    if smin < floor:
        return None, smin
    Q, R = qr(sub, mode="economic")
    return solve_triangular(R, Q.T @ y), smin


def add_ls_del(s_hat: np.ndarray, A: np.ndarray, y: np.ndarray, T, params: AddLSDelParams,
               retry: bool = True):
    """Support refinement: threshold-add, LS, threshold-delete, final LS.

    Returns ``(T_final, S_hat, report)``. Raises :class:`IllConditionedLS`
    if the LS submatrix stays ill-conditioned after one retry with the
    addition threshold doubled.
    """
    A = np.asarray(A, float)
    y = np.asarray(y, float)
    s_hat = np.asarray(s_hat, float)
    n = A.shape[1]
    T = np.unique(np.asarray(T, dtype=int))
    if s_hat.shape != (n,) or y.shape != (A.shape[0],):
        raise ValueError("s_hat, A and y have inconsistent shapes")
    in_T = np.zeros(n, dtype=bool)
    in_T[T] = True

    alpha_add = params.alpha_add
    retried = False
    while True:
        T_add = np.flatnonzero(in_T | (np.abs(s_hat) > alpha_add))
        coef, smin = _ls_on(A, y, T_add, params.conditioning_floor)
        if coef is not None:
            break
        if not retry or retried:
            raise IllConditionedLS(
                f"ill-conditioned LS: |T_add|={T_add.size}, min singular value {smin:.3g} "
                f"< {params.conditioning_floor}")
        log.debug("Add-LS-Del retry with alpha_add doubled (|T_add|=%d)", T_add.size)
        alpha_add *= 2.0
        retried = True

    T_fin = T_add[~(np.abs(coef) < params.alpha_del)]
    S_hat = np.zeros(n)
    if T_fin.size:
        Q, R = qr(A[:, T_fin], mode="economic")
        S_hat[T_fin] = solve_triangular(R, Q.T @ y)
    ls_res = float(np.linalg.norm(y - A @ S_hat))
    return T_fin, S_hat, AddLSDelReport(T_add=T_add, retried=retried, ls_residual=ls_res,
                                         min_singular=smin)


@dataclass
class EpsilonRule:
    """Running noise-level estimate driving the constraint radius.

    ``r_hat`` is an exponentially weighted RMS of past fit residuals. The
    radius is ``c_eps`` times that, which has to cover the frame-to-frame
    spread of the residual and not just its typical size.
    """

    c_eps: float = 1.5
    floor: float = 1e-6
    smoothing: float = 0.9
    eps_init: float = 1.0
    r_hat: float | None = None

    def epsilon(self, y_canc: np.ndarray) -> float:
        return set_epsilon(self.r_hat, y_canc, self.c_eps, self.floor, self.eps_init)

    def observe(self, residual_norm: float, m: int | None = None, k: int = 0) -> None:
        """Fold in a fit residual; with ``m`` rows and ``k`` fitted entries the
        norm is rescaled by ``sqrt(m / (m - k))`` so it is not biased low."""
        residual_norm = float(residual_norm)
        if m is not None and 0 < k < m:
            residual_norm *= math.sqrt(m / (m - k))
        if self.r_hat is None:
            self.r_hat = float(residual_norm)
        else:
            self.r_hat = math.sqrt(self.smoothing * self.r_hat ** 2
                                   + (1.0 - self.smoothing) * residual_norm ** 2)

    def reset_to(self, eps: float) -> None:
        """Restart the estimate at the noise level implied by a radius that worked."""
        self.r_hat = float(eps) / self.c_eps


def set_epsilon(r_hat, y_canc, c_eps: float = 1.5, floor: float = 1e-6,
                eps_init: float = 1.0) -> float:
    if r_hat is None:
        return float(eps_init)
    return max(c_eps * r_hat, floor * float(np.linalg.norm(y_canc)))
