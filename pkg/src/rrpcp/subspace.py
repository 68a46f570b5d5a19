"""Principal-component subspace estimate, its complement, and incremental updates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles


@dataclass(frozen=True)
class SubspaceEstimate:
    """Orthonormal PC basis ``P`` (n x r), singular values ``sigma`` and the
    explicit complement ``A`` ((n - r) x n) whose rows span range(P)^perp."""

    P: np.ndarray
    sigma: np.ndarray
    A: np.ndarray
    frame_of_last_update: int = 0
    mean: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def rank(self) -> int:
        return self.P.shape[1]

    def orthogonality_errors(self) -> dict[str, float]:
        r, n = self.rank, self.n
        return {
            "PtP": float(np.max(np.abs(self.P.T @ self.P - np.eye(r)), initial=0.0)),
            "AAt": float(np.max(np.abs(self.A @ self.A.T - np.eye(n - r)), initial=0.0)),
            "AP": float(np.max(np.abs(self.A @ self.P), initial=0.0)),
        }


def complement(P: np.ndarray) -> np.ndarray:
    """Rows form an orthonormal basis of the orthogonal complement of range(P)."""
    n, r = P.shape
    if r >= n:
        raise ValueError(f"rank {r} leaves no complement in dimension {n}")
    if r == 0:
        return np.eye(n)
    Q, _ = np.linalg.qr(P, mode="complete")
    return np.ascontiguousarray(Q[:, r:].T)


def from_basis(P: np.ndarray, sigma, frame: int = 0, mean=None) -> SubspaceEstimate:
    return SubspaceEstimate(P=P, sigma=np.asarray(sigma, float), A=complement(P),
                            frame_of_last_update=frame, mean=mean)


def estimate_initial_pc(training: np.ndarray, energy_fraction: float = 0.9999,
                        center: bool = False) -> SubspaceEstimate:
    """PCA of an ``(n, length)`` matrix of background-only frames.

    Keeps the fewest leading left singular vectors whose squared singular
    values reach ``energy_fraction`` of the total.
    """
    training = np.asarray(training, float)
    if training.ndim != 2 or training.shape[1] < 2:
        raise ValueError("training must be an (n, length) matrix with length >= 2")
    if not 0.0 < energy_fraction <= 1.0:
        raise ValueError("energy_fraction must lie in (0, 1]")
    n = training.shape[0]
    mean = training.mean(axis=1) if center else None
    X = training - mean[:, None] if center else training
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    energy = s ** 2
    total = energy.sum()
    if total == 0.0:
        raise ValueError("training data is identically zero")
    cum = np.cumsum(energy)
    r = int(np.searchsorted(cum, energy_fraction * total * (1.0 - 1e-12))) + 1
    if r >= n:
        raise ValueError(f"energy fraction {energy_fraction} needs rank {r} >= n={n}; "
                         "no complement would remain")
    return from_basis(U[:, :r].copy(), s[:r], mean=mean)


def project(sub: SubspaceEstimate, M_t: np.ndarray) -> np.ndarray:
    M_t = np.asarray(M_t, float)
    if M_t.shape != (sub.n,):
        raise ValueError(f"frame length {M_t.shape} does not match n={sub.n}")
    return sub.A @ M_t


def cancel_noise(sub: SubspaceEstimate, y: np.ndarray, L_prev: np.ndarray, f: float) -> np.ndarray:
    """Remove the AR-predictable part of the low-rank leakage from ``y``."""
    L_prev = np.asarray(L_prev, float)
    if L_prev.shape != (sub.n,) or y.shape != (sub.A.shape[0],):
        raise ValueError("dimension mismatch in noise cancellation")
    if f == 0.0:
        return y.copy()
    return y - f * (sub.A @ L_prev)


def update_pc(sub: SubspaceEstimate, buffer: np.ndarray, add_threshold: float = 0.05,
              delete_threshold: float = 0.01, forgetting: float = 0.98,
              frame: int | None = None, max_rank: int | None = None) -> SubspaceEstimate:
    """Fold the columns of ``buffer`` (n x k) into the subspace by an incremental SVD.

    The old spectrum is down-weighted by ``forgetting``. After the small SVD,
    output directions that live mostly in the old span are retained while
    their singular value stays at or above ``delete_threshold`` times the
    largest; directions that live mostly in the new residual span are
    admitted only at or above ``add_threshold`` times the largest.
    """
    B = np.asarray(buffer, float)
    if B.ndim == 1:
        B = B[:, None]
    if B.shape[0] != sub.n:
        raise ValueError(f"buffer vectors have length {B.shape[0]}, expected {sub.n}")
    if B.shape[1] == 0:
        raise ValueError("buffer is empty")
    if sub.mean is not None:
        B = B - sub.mean[:, None]
    n, r = sub.P.shape
    k = B.shape[1]

    C = sub.P.T @ B
    resid = B - sub.P @ C
    # second pass of Gram-Schmidt keeps the residual basis orthogonal to P
    C2 = sub.P.T @ resid
    C += C2
    resid -= sub.P @ C2
    Qr, Rr = np.linalg.qr(resid)

    K = np.zeros((r + k, r + k))
    K[:r, :r] = np.diag(forgetting * sub.sigma)
    K[:r, r:] = C
    K[r:, r:] = Rr
    Uk, s, _ = np.linalg.svd(K)

    smax = s[0] if s.size else 0.0
    old_share = np.sum(Uk[:r, :] ** 2, axis=0)
    existing = old_share >= 0.5
    keep = np.where(existing, s >= delete_threshold * smax, s >= add_threshold * smax)
    keep &= s > 0
    if max_rank is None:
        max_rank = n - 1
    idx = np.flatnonzero(keep)[:max_rank]

    basis = np.hstack([sub.P, Qr])
    P_new = basis @ Uk[:, idx]
    # re-orthonormalize to stop rounding drift over many updates
    Qp, Rp = np.linalg.qr(P_new)
    P_new = Qp * np.sign(np.diag(Rp))
    fr = sub.frame_of_last_update if frame is None else frame
    return from_basis(P_new, s[idx], frame=fr, mean=sub.mean)


def max_principal_angle(P1: np.ndarray, P2: np.ndarray) -> float:
    if P1.shape[1] == 0 or P2.shape[1] == 0:
        return 0.0
    return float(np.max(subspace_angles(P1, P2)))


def subspace_gap(P_true: np.ndarray, P_est: np.ndarray) -> float:
    """Largest angle between a vector of range(P_true) and range(P_est)."""
    resid = P_true - P_est @ (P_est.T @ P_true)
    return float(np.arcsin(min(np.linalg.norm(resid, 2), 1.0)))
