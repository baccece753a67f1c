"""Lanczos propagation of exp(-i t H) v for Hermitian operators.

Shared by the one-body propagators and the exact Fock evolution. The
stepper is adaptive: it tries the full interval first and halves the
substep until the Saad-style residual estimate fits the error budget.
All decisions are data-driven, so repeated calls are deterministic.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import ConvergenceError

_BREAKDOWN = 1e-14


def _lanczos_step(matvec, v0, tau, tol_sub, m_max):
    """One Lanczos substep. Returns (w, err_est, m_used) or None if the
    basis hit m_max without meeting tol_sub."""
    n = v0.shape[0]
    beta0 = np.linalg.norm(v0)
    if beta0 == 0.0:
        return v0.copy(), 0.0, 0

    V = np.empty((m_max, n), dtype=np.complex128)
    alpha = np.empty(m_max)
    beta = np.empty(m_max)
    V[0] = v0 / beta0

    m = 0
    while True:
        hv = matvec(V[m])
        a = np.real(np.vdot(V[m], hv))
        hv = hv - a * V[m]
        if m > 0:
            hv -= beta[m - 1] * V[m - 1]
        # full reorthogonalization keeps the residual estimate honest
        hv -= V[: m + 1].conj() @ hv @ V[: m + 1]
        b = np.linalg.norm(hv)
        alpha[m] = a
        beta[m] = b
        m += 1

        if m >= 2 or b < _BREAKDOWN:
            theta, Q = eigh_tridiagonal(alpha[:m], beta[: m - 1])
            small = Q @ (np.exp(-1j * tau * theta) * Q[0, :])
            err = abs(b * small[-1]) * beta0
            if b < _BREAKDOWN or err <= tol_sub:
                return beta0 * (small @ V[:m]), err, m
        if m >= m_max:
            return None
        V[m] = hv / b


def krylov_expm_multiply(matvec, v, t, tol, m_max=48, max_substeps=100_000):
    """Approximate exp(-i t H) v with l2 error <= tol * ||v||.

    Parameters
    ----------
    matvec : callable
        Action of the Hermitian operator H.
    v : np.ndarray
        Start vector (not modified).
    t : float
        Evolution time.
    tol : float
        Relative l2 error budget for the whole interval.
    """
    v = np.asarray(v, dtype=np.complex128)
    nrm = np.linalg.norm(v)
    if t == 0.0 or nrm == 0.0:
        return v.copy()

    remaining = float(t)
    tau = remaining
    w = v.copy()
    budget = tol * nrm
    spent = 0.0
    steps = 0
    while abs(remaining) > 0.0:
        if abs(tau) > abs(remaining):
            tau = remaining
        tol_sub = budget * abs(tau) / abs(t)
        out = _lanczos_step(matvec, w, tau, tol_sub, m_max)
        if out is None:
            tau *= 0.5
            if steps + abs(remaining) / max(abs(tau), 1e-300) > max_substeps:
                raise ConvergenceError(
                    "Krylov propagation stalled while shrinking the substep",
                    residual=spent, step=steps)
            continue
        w, err, _ = out
        spent += err
        remaining -= tau
        steps += 1
        if steps > max_substeps:
            raise ConvergenceError(
                f"Krylov propagation exceeded {max_substeps} substeps",
                residual=spent, step=steps)
    return w
