"""One-body Anderson Hamiltonian, propagators, and localization profiles.

The lattice Hamiltonian has hopping -1 between nearest neighbors and
diagonal lambda * v(x); the discrete Laplacian's constant diagonal is
absorbed, so at lambda = 0 the matrix is purely off-diagonal. Propagation
offers an exact eigendecomposition route for small boxes, a Chebyshev
expansion with Gershgorin spectral bounds, and an adaptive Krylov stepper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.special
from scipy.linalg import eigh

from ._krylov import krylov_expm_multiply
from .disorder import Potential
from .errors import ConvergenceError
from .lattice import LatticeBox
from .output import write_csv, write_json

DEFAULT_EIGEN_CAP = 4096
AMPLITUDE_FLOOR = 1e-14


class WaveFunction:
    """Complex amplitudes over a box with a cached l2 norm."""

    __slots__ = ("box", "amplitudes", "norm", "meta")

    def __init__(self, box: LatticeBox, amplitudes, meta=None):
        self.box = box
        self.amplitudes = np.asarray(amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (box.site_count,):
            raise ValueError("amplitudes must assign one value per site")
        self.norm = float(np.linalg.norm(self.amplitudes))
        self.meta = dict(meta) if meta else {}

    def check_norm(self, rtol: float = 1e-12) -> None:
        fresh = float(np.linalg.norm(self.amplitudes))
        if abs(fresh - self.norm) > rtol * max(fresh, 1.0):
            raise ValueError("cached norm is stale")

    def normalized(self) -> "WaveFunction":
        if self.norm == 0.0:
            raise ValueError("cannot normalize the zero state")
        return WaveFunction(self.box, self.amplitudes / self.norm, self.meta)

    def density(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    @staticmethod
    def delta(box: LatticeBox, site) -> "WaveFunction":
        idx = site if np.isscalar(site) else box.index_of(site)
        amp = np.zeros(box.site_count, dtype=np.complex128)
        amp[int(idx)] = 1.0
        return WaveFunction(box, amp)

    @staticmethod
    def bump(box: LatticeBox, center, width: float, cutoff: float = 3.0,
             norm: str = "l1") -> "WaveFunction":
        """Discrete Gaussian truncated to its support window, renormalized.

        The support window (all sites within cutoff*width of the center)
        is recorded in `meta` so experiment reports can state it exactly.
        """
        if width <= 0:
            raise ValueError("width must be positive")
        radius = max(1, int(round(cutoff * width)))
        dist = box.distances_from(center, norm=norm)
        amp = np.where(dist <= radius,
                       np.exp(-0.5 * (dist / width) ** 2), 0.0)
        total = np.linalg.norm(amp)
        if total == 0.0:
            raise ValueError("bump support is empty")
        coord = center if not np.isscalar(center) else box.coords[int(center)]
        return WaveFunction(box, amp / total, meta={
            "phi0": "bump",
            "center": [int(c) for c in np.atleast_1d(coord)],
            "width": float(width),
            "support_radius": radius,
            "support_min_dist_origin": int(
                box.distances_from(box.origin_index, norm=norm)[amp > 0].min()),
        })


class OneBodyHamiltonian:
    """Sparse h = -hopping + lambda * v with an optional spectral cache."""

    def __init__(self, box: LatticeBox, potential: Potential, lam: float,
                 matrix: sp.csr_matrix, eigen_cap: int = DEFAULT_EIGEN_CAP):
        self.box = box
        self.potential = potential
        self.lam = float(lam)
        self.matrix = matrix
        self.eigen_cap = eigen_cap
        self._eigensystem = None
        self._dense = None

    def matvec(self, psi: np.ndarray) -> np.ndarray:
        return self.matrix @ psi

    def dense(self) -> np.ndarray:
        """Dense copy of the matrix, cached (used by the quadratic flows)."""
        if self._dense is None:
            self._dense = self.matrix.toarray()
        return self._dense

    def spectral_bounds(self):
        """Gershgorin bounds on the spectrum."""
        diag = self.matrix.diagonal()
        degrees = np.asarray([len(nb) for nb in self.box.neighbors], dtype=float)
        return float(np.min(diag - degrees)), float(np.max(diag + degrees))

    def eigensystem(self):
        if self._eigensystem is None:
            if self.box.site_count > self.eigen_cap:
                raise ValueError(
                    f"eigendecomposition of {self.box.site_count} sites exceeds"
                    f" the cap {self.eigen_cap}")
            energies, vectors = eigh(self.matrix.toarray())
            self._eigensystem = (energies, vectors)
        return self._eigensystem


def assemble_hamiltonian(box: LatticeBox, potential: Potential,
                         lam: float, eigen_cap: int = DEFAULT_EIGEN_CAP
                         ) -> OneBodyHamiltonian:
    """Build the sparse one-body matrix: -1 on neighbor pairs, lambda*v on
    the diagonal."""
    if potential.box.site_count != box.site_count or potential.box.d != box.d:
        raise ValueError("potential is defined on a different box")
    rows, cols, vals = [], [], []
    for i, nb in enumerate(box.neighbors):
        for j in nb:
            rows.append(i)
            cols.append(int(j))
            vals.append(-1.0)
    diag_idx = np.arange(box.site_count)
    rows.extend(diag_idx.tolist())
    cols.extend(diag_idx.tolist())
    vals.extend((lam * potential.values).tolist())
    matrix = sp.csr_matrix(
        (np.array(vals), (np.array(rows), np.array(cols))),
        shape=(box.site_count, box.site_count))
    return OneBodyHamiltonian(box, potential, lam, matrix, eigen_cap=eigen_cap)


def _propagate_eigen(h, amplitudes, t):
    energies, vectors = h.eigensystem()
    return vectors @ (np.exp(-1j * t * energies) * (vectors.conj().T @ amplitudes))


def _chebyshev_order(z: float, tol: float) -> int:
    # |J_k(z)| decays super-exponentially past k ~ z; start past the turning
    # point and extend until the terms are negligible.
    k = int(abs(z) + 12.0 * abs(z) ** (1.0 / 3.0) + 20)
    while scipy.special.jv(k, z) ** 2 > (0.01 * tol) ** 2:
        k += 16
        if k > 100 * (abs(z) + 50):
            raise ConvergenceError("Chebyshev order search did not terminate")
    return k


def _propagate_chebyshev(h, amplitudes, t, tol):
    lo, hi = h.spectral_bounds()
    half_span = 0.5 * (hi - lo)
    center = 0.5 * (hi + lo)
    if half_span == 0.0:
        return np.exp(-1j * t * center) * amplitudes
    z = t * half_span
    order = _chebyshev_order(z, tol)
    bessel = scipy.special.jv(np.arange(order + 1), z)

    # truncate once the remaining coefficient mass is far below tol
    tail = np.cumsum(np.abs(bessel[::-1]))[::-1]
    keep = int(np.searchsorted(-tail, -0.05 * tol)) + 1
    keep = max(2, min(order + 1, keep))

    scale = 1.0 / half_span
    mat = h.matrix

    def scaled(psi):
        return scale * (mat @ psi) - (center * scale) * psi

    tk_prev = amplitudes.astype(np.complex128)
    tk = scaled(tk_prev)
    acc = bessel[0] * tk_prev + 2.0 * (-1j) * bessel[1] * tk
    for k in range(2, keep):
        tk_next = 2.0 * scaled(tk) - tk_prev
        tk_prev, tk = tk, tk_next
        acc += (2.0 * ((-1j) ** (k % 4)) * bessel[k]) * tk
    return np.exp(-1j * t * center) * acc


def propagate(h: OneBodyHamiltonian, psi0: WaveFunction, t: float,
              method: str = "auto", tol: float = 1e-10) -> WaveFunction:
    """Evolve psi0 by exp(-i t h) with l2 error <= tol.

    Methods: "eigen" (exact within roundoff, needs the spectral cache),
    "chebyshev" (polynomial expansion, any size), "krylov" (adaptive
    Lanczos, good for single long steps), "auto" (eigen when cached or
    affordable, chebyshev otherwise).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    amp = psi0.amplitudes
    if t == 0.0:
        return WaveFunction(psi0.box, amp.copy(), psi0.meta)
    if method == "auto":
        method = "eigen" if h.box.site_count <= h.eigen_cap else "chebyshev"
    if method == "eigen":
        out = _propagate_eigen(h, amp, t)
    elif method == "chebyshev":
        out = _propagate_chebyshev(h, amp.astype(np.complex128), t, tol)
    elif method == "krylov":
        out = krylov_expm_multiply(h.matvec, amp, t, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    return WaveFunction(psi0.box, out, psi0.meta)


def propagator_kernel(h: OneBodyHamiltonian, z, t_grid,
                      method: str = "auto", tol: float = 1e-10) -> np.ndarray:
    """u_{x,z}(t) = <delta_z, exp(-i t h) delta_x> as an (x, t) matrix.

    By symmetry of the real matrix h this equals the evolution of delta_z
    sampled at every site, one column per grid time.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0:
        raise ValueError("t_grid must be non-empty")
    if np.any(np.diff(t_grid) < 0) or t_grid[0] < 0:
        raise ValueError("t_grid must be sorted and non-negative")
    idx = z if np.isscalar(z) else h.box.index_of(z)
    delta = WaveFunction.delta(h.box, int(idx))

    if method == "auto" and h.box.site_count <= h.eigen_cap:
        method = "eigen"
    if method == "eigen":
        energies, vectors = h.eigensystem()
        w = vectors.conj().T @ delta.amplitudes
        phases = np.exp(-1j * np.outer(energies, t_grid))
        return vectors @ (phases * w[:, None])

    cols = np.empty((h.box.site_count, t_grid.size), dtype=np.complex128)
    state = delta
    prev_t = 0.0
    for j, t in enumerate(t_grid):
        state = propagate(h, state, t - prev_t, method=method, tol=tol)
        prev_t = t
        cols[:, j] = state.amplitudes
    return cols


@dataclass
class SudlProfile:
    """Peak transition amplitudes from a source site and their decay fit."""

    x0: int
    D: np.ndarray = field(repr=False)
    distances: np.ndarray = field(repr=False)
    gamma: float
    residual: float
    t_grid: np.ndarray = field(repr=False)
    fit_window: tuple
    in_fit: np.ndarray = field(repr=False)
    norm: str = "l1"

    def to_csv(self, path) -> None:
        rows = []
        for i in range(self.D.shape[0]):
            d_floored = max(float(self.D[i]), AMPLITUDE_FLOOR)
            rows.append((i, int(self.distances[i]), float(self.D[i]),
                         float(np.log(d_floored)), bool(self.in_fit[i])))
        write_csv(path, ("site_index", "distance", "D", "log_D",
                         "in_fit_window"), rows)

    def sidecar(self, path, **extra) -> None:
        payload = {
            "gamma": self.gamma,
            "residual": self.residual,
            "t_max": float(self.t_grid[-1]),
            "dt": float(self.t_grid[1] - self.t_grid[0])
            if len(self.t_grid) > 1 else 0.0,
            "fit_window": list(self.fit_window),
            "norm": self.norm,
        }
        payload.update(extra)
        write_json(path, payload)


def _fit_decay(distances, D, fit_window, floor=AMPLITUDE_FLOOR):
    r_min, r_max = fit_window
    rho_vals = []
    log_vals = []
    for rho in range(int(r_min), int(r_max) + 1):
        sel = distances == rho
        if not np.any(sel):
            continue
        peak = float(D[sel].max())
        if peak < floor:
            continue  # roundoff-dominated, excluded from the fit
        rho_vals.append(float(rho))
        log_vals.append(np.log(peak))
    if len(rho_vals) < 4:
        raise ValueError(
            f"fit window {fit_window} has {len(rho_vals)} usable distances;"
            " need at least 4")
    rho_arr = np.asarray(rho_vals)
    log_arr = np.asarray(log_vals)
    slope, intercept = np.polyfit(rho_arr, log_arr, 1)
    resid = log_arr - (slope * rho_arr + intercept)
    return max(0.0, -float(slope)), float(np.sqrt(np.mean(resid**2)))


def sudl_profile(h: OneBodyHamiltonian, x0, t_grid, fit_window,
                 norm: str = "l1", method: str = "auto",
                 tol: float = 1e-10) -> SudlProfile:
    """Peak amplitude profile D(y) = max_t |<exp(-i t h) delta_x0, delta_y>|
    and the fitted exponential decay rate over `fit_window` distances.

    The supremum over time is replaced by a max over `t_grid`; t = 0 is
    always included so D(x0) = 1 exactly.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.size == 0 or t_grid[0] != 0.0:
        t_grid = np.concatenate(([0.0], t_grid))
    idx = x0 if np.isscalar(x0) else h.box.index_of(x0)
    kernel = propagator_kernel(h, int(idx), t_grid, method=method, tol=tol)
    D = np.abs(kernel).max(axis=1)
    distances = h.box.distances_from(int(idx), norm=norm)
    gamma, residual = _fit_decay(distances, D, fit_window)
    in_fit = (distances >= fit_window[0]) & (distances <= fit_window[1])
    return SudlProfile(x0=int(idx), D=D, distances=distances, gamma=gamma,
                       residual=residual, t_grid=t_grid,
                       fit_window=(int(fit_window[0]), int(fit_window[1])),
                       in_fit=in_fit, norm=norm)
