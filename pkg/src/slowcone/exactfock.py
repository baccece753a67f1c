"""Exact N-boson dynamics on small boxes: the oracle for everything else.

Works in the fixed-N occupation basis (stars and bars), with the
Hamiltonian assembled sparsely and evolved by adaptive Lanczos stepping.
Observables are taken directly from the state vector; nothing here
involves a mean-field or quadratic approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from ._krylov import krylov_expm_multiply
from .disorder import Potential
from .errors import ConvergenceError, SiteBudgetError
from .lattice import LatticeBox, Region
from .onebody import WaveFunction

DEFAULT_NNZ_BUDGET = 5_000_000


def _occupation_table(sites: int, total: int) -> np.ndarray:
    """All occupation vectors with the given total, first site varying
    slowest from high to low (so (2,0) precedes (1,1) precedes (0,2))."""
    if sites == 1:
        return np.array([[total]], dtype=np.int32)
    blocks = []
    for head in range(total, -1, -1):
        rest = _occupation_table(sites - 1, total - head)
        cols = np.full((rest.shape[0], 1), head, dtype=np.int32)
        blocks.append(np.hstack([cols, rest]))
    return np.vstack(blocks)


class FockBasis:
    """Occupation basis of the N-particle sector over a box."""

    def __init__(self, box: LatticeBox, N: int):
        if N < 0:
            raise ValueError("N must be >= 0")
        self.box = box
        self.N = int(N)
        self.occupations = _occupation_table(box.site_count, N)
        self.dimension = self.occupations.shape[0]
        expected = math.comb(N + box.site_count - 1, N)
        assert self.dimension == expected
        self._index = {tuple(row): i
                       for i, row in enumerate(self.occupations)}
        self._lower_basis = None
        self._lowering = {}

    def index_of(self, occupation) -> int:
        return self._index[tuple(int(n) for n in occupation)]

    @property
    def lower_basis(self) -> "FockBasis":
        if self.N == 0:
            raise ValueError("no lower sector below N=0")
        if self._lower_basis is None:
            self._lower_basis = FockBasis(self.box, self.N - 1)
        return self._lower_basis

    def lowering(self, x: int):
        """Index arrays (src, dst, sqrt_n) realizing a_x into the (N-1)
        sector."""
        if x not in self._lowering:
            occ = self.occupations
            src = np.nonzero(occ[:, x] > 0)[0]
            lower = self.lower_basis
            dst = np.empty(src.shape[0], dtype=np.int64)
            for k, i in enumerate(src):
                row = occ[i].copy()
                row[x] -= 1
                dst[k] = lower._index[tuple(row)]
            amp = np.sqrt(occ[src, x].astype(np.float64))
            self._lowering[x] = (src, dst, amp)
        return self._lowering[x]


class FockState:
    """Dense complex vector over a FockBasis."""

    __slots__ = ("basis", "amplitudes", "norm")

    def __init__(self, basis: FockBasis, amplitudes):
        self.basis = basis
        self.amplitudes = np.asarray(amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (basis.dimension,):
            raise ValueError("amplitude vector does not match the basis")
        self.norm = float(np.linalg.norm(self.amplitudes))


def build_fock_hamiltonian(box: LatticeBox, potential: Potential, lam: float,
                           U: float, N: int,
                           nnz_budget: int = DEFAULT_NNZ_BUDGET,
                           basis: FockBasis | None = None) -> sp.csr_matrix:
    """Sparse H_N: one-body hopping/potential plus on-site U/(2N) pair
    interaction, restricted to the N-particle sector.

    Raises SiteBudgetError when the estimated nonzero count exceeds the
    budget; caps are hard errors, never silent truncations.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if potential.box.site_count != box.site_count:
        raise ValueError("potential is defined on a different box")
    sites = box.site_count
    dim = math.comb(N + sites - 1, N)
    est_nnz = dim * (1 + 2 * box.edge_count)
    if est_nnz > nnz_budget:
        raise SiteBudgetError(
            f"estimated {est_nnz} nonzeros exceeds budget {nnz_budget}"
            f" (dim={dim}, edges={box.edge_count})")

    if basis is None:
        basis = FockBasis(box, N)
    occ = basis.occupations.astype(np.float64)

    diag = occ @ (lam * potential.values) \
        + (U / (2.0 * N)) * np.sum(occ * (occ - 1.0), axis=1)

    rows = [np.arange(dim, dtype=np.int64)]
    cols = [np.arange(dim, dtype=np.int64)]
    vals = [diag]

    occ_int = basis.occupations
    for x in range(sites):
        for y in box.neighbors[x]:
            y = int(y)
            # a_x^dagger a_y with coefficient -1
            src = np.nonzero(occ_int[:, y] > 0)[0]
            if src.size == 0:
                continue
            amp = -np.sqrt(occ_int[src, y].astype(np.float64)
                           * (occ_int[src, x] + 1.0))
            dst = np.empty(src.shape[0], dtype=np.int64)
            for k, i in enumerate(src):
                row = occ_int[i].copy()
                row[y] -= 1
                row[x] += 1
                dst[k] = basis._index[tuple(row)]
            rows.append(dst)
            cols.append(src)
            vals.append(amp)

    H = sp.csr_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(dim, dim))
    return H


def evolve_fock(H: sp.csr_matrix, psi0: FockState, t: float,
                tol: float = 1e-10) -> FockState:
    """exp(-i t H) psi0 by adaptive Krylov stepping; norm conserved to tol."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if t == 0.0:
        return FockState(psi0.basis, psi0.amplitudes.copy())
    out = krylov_expm_multiply(H.dot, psi0.amplitudes, t, tol)
    state = FockState(psi0.basis, out)
    drift = abs(state.norm - psi0.norm)
    if drift > 10.0 * tol * max(psi0.norm, 1.0):
        raise ConvergenceError(
            f"norm drifted by {drift:.3e} during Fock evolution",
            residual=drift)
    return state


def product_state(phi: WaveFunction, N: int,
                  basis: FockBasis | None = None) -> FockState:
    """phi tensored N times: amplitude(n) = sqrt(N!/prod n_x!) prod phi^n_x.

    Evaluated in log space so large multinomial factors cannot overflow.
    """
    if abs(phi.norm - 1.0) > 1e-10:
        raise ValueError("phi must be l2-normalized")
    if basis is None:
        basis = FockBasis(phi.box, N)
    occ = basis.occupations.astype(np.float64)
    amp_abs = np.abs(phi.amplitudes)
    phase = np.angle(phi.amplitudes)

    log_mult = 0.5 * (math.lgamma(N + 1) - gammaln(occ + 1.0).sum(axis=1))
    safe_log = np.where(amp_abs > 0.0, np.log(np.maximum(amp_abs, 1e-300)), 0.0)
    log_mag = log_mult + occ @ safe_log
    total_phase = occ @ phase
    dead = (occ[:, amp_abs == 0.0] > 0).any(axis=1) if np.any(amp_abs == 0.0) \
        else np.zeros(basis.dimension, dtype=bool)
    amplitudes = np.where(dead, 0.0,
                          np.exp(log_mag + 1j * total_phase))
    return FockState(basis, amplitudes)


def _lowered_columns(psi: FockState) -> np.ndarray:
    """Matrix whose column x is a_x psi (in the N-1 sector)."""
    basis = psi.basis
    sites = basis.box.site_count
    lower_dim = basis.lower_basis.dimension
    cols = np.zeros((lower_dim, sites), dtype=np.complex128)
    for x in range(sites):
        src, dst, amp = basis.lowering(x)
        cols[dst, x] = amp * psi.amplitudes[src]
    return cols


def one_rdm(psi: FockState) -> np.ndarray:
    """gamma(x, y) = <psi, a_y^dagger a_x psi>; Hermitian PSD with trace N."""
    cols = _lowered_columns(psi)
    return (cols.conj().T @ cols).T


def _raise_phi(basis: FockBasis, chi: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """a^dagger(phi) chi, mapping the N-1 sector back to N."""
    out = np.zeros(basis.dimension, dtype=np.complex128)
    for x in range(basis.box.site_count):
        if phi[x] == 0.0:
            continue
        src, dst, amp = basis.lowering(x)
        # a_x^dagger as the adjoint of the lowering map
        out[src] += phi[x] * amp * chi[dst]
    return out


def fluctuation_numbers(psi: FockState, phi: WaveFunction,
                        region: Region | None = None):
    """(<N_plus>, <N_plus restricted to the region>).

    N_plus = N - <phi|gamma|phi> counts particles orthogonal to the
    condensate phi; the local version is Tr(q 1_B q gamma) with
    q = 1 - |phi><phi|.
    """
    if abs(phi.norm - 1.0) > 1e-10:
        raise ValueError("phi must be l2-normalized")
    gamma = one_rdm(psi)
    pv = phi.amplitudes
    n_total = psi.basis.N * (psi.norm ** 2)
    n_plus = float(np.real(n_total - pv.conj() @ gamma @ pv))
    if region is None:
        return n_plus, n_plus
    q_gamma_q = _project_out(gamma, pv)
    local = float(np.real(np.sum(q_gamma_q.diagonal()[region.mask])))
    return n_plus, local


def _project_out(gamma: np.ndarray, pv: np.ndarray) -> np.ndarray:
    """q gamma q for q = 1 - |phi><phi|."""
    gp = gamma @ pv
    pg = pv.conj() @ gamma
    pgp = pv.conj() @ gp
    out = gamma - np.outer(gp, pv.conj()) - np.outer(pv, pg)
    out += pgp * np.outer(pv, pv.conj())
    return out


def fluctuation_moment(psi: FockState, phi: WaveFunction, j: int) -> float:
    """<(N_plus + 1)^j> for j in {1, 2}, via direct operator application.

    dGamma(q) psi = N psi - a^dagger(phi) a(phi) psi, so no 2-RDM is ever
    assembled; j = 2 goes through ||(dGamma(q) + 1) psi||^2.
    """
    if j not in (1, 2):
        raise ValueError("j must be 1 or 2")
    if abs(phi.norm - 1.0) > 1e-10:
        raise ValueError("phi must be l2-normalized")
    basis = psi.basis
    pv = phi.amplitudes
    cols = _lowered_columns(psi)
    a_phi_psi = cols @ pv.conj()
    vec = (basis.N + 1.0) * psi.amplitudes - _raise_phi(basis, a_phi_psi, pv)
    if j == 1:
        return float(np.real(np.vdot(psi.amplitudes, vec)))
    return float(np.real(np.vdot(vec, vec)))


def meanfield_error(psi: FockState, phi: WaveFunction, O: np.ndarray,
                    region: Region | None = None) -> float:
    """|Tr((gamma/N - |phi><phi|) O)| for an observable supported in a ball.

    If `region` is given, O must satisfy O = P O P with P the region mask
    projector (checked, hard error otherwise).
    """
    O = np.asarray(O, dtype=np.complex128)
    sites = psi.basis.box.site_count
    if O.shape != (sites, sites):
        raise ValueError("O must be a full-box matrix")
    if region is not None:
        inside = region.mask
        masked = O.copy()
        masked[~inside, :] = 0.0
        masked[:, ~inside] = 0.0
        if not np.allclose(masked, O, atol=1e-12, rtol=0.0):
            raise ValueError("O has support outside the declared region")
    gamma = one_rdm(psi)
    pv = phi.amplitudes
    diff = gamma / psi.basis.N - np.outer(pv, pv.conj())
    return float(abs(np.sum(diff * O.T)))
