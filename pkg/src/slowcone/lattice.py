"""Finite boxes in Z^d: site indexing, neighbor structure, and ball regions.

The box is a hypercube of side L with the origin pinned to its center
(multi-index L//2 on every axis). Site indices are row-major over axes,
and every coordinate is reported relative to the origin, so a site with
coordinate 0 is the center regardless of L.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SiteBudgetError

DEFAULT_SITE_BUDGET = 2_000_000

_NORMS = ("l1", "linf")


def _coordinate_distance(delta: np.ndarray, norm: str) -> np.ndarray:
    delta = np.abs(delta)
    if norm == "l1":
        return delta.sum(axis=-1)
    if norm == "linf":
        return delta.max(axis=-1)
    raise ValueError(f"unknown norm {norm!r}; expected one of {_NORMS}")


@dataclass(frozen=True)
class LatticeBox:
    """Finite hypercubic box in Z^d with a centered origin.

    Attributes
    ----------
    d : int
        Spatial dimension.
    L : int
        Side length per axis.
    bc : str
        Boundary condition, "open" or "periodic".
    coords : np.ndarray
        (site_count, d) integer coordinates relative to the origin.
    neighbors : tuple of np.ndarray
        Sorted nearest-neighbor site indices per site.
    """

    d: int
    L: int
    bc: str
    coords: np.ndarray = field(repr=False)
    neighbors: tuple = field(repr=False)
    origin_index: int

    @property
    def site_count(self) -> int:
        return self.coords.shape[0]

    @property
    def edge_count(self) -> int:
        return sum(len(nb) for nb in self.neighbors) // 2

    def index_of(self, coord) -> int:
        """Site index of an integer coordinate (relative to the origin)."""
        coord = np.atleast_1d(np.asarray(coord, dtype=np.int64))
        if coord.shape != (self.d,):
            raise ValueError(f"coordinate must have {self.d} components")
        multi = coord + self.L // 2
        if np.any(multi < 0) or np.any(multi >= self.L):
            raise ValueError(f"coordinate {tuple(coord)} outside the box")
        idx = 0
        for k in range(self.d):
            idx = idx * self.L + int(multi[k])
        return idx

    def coordinate_of(self, index: int) -> np.ndarray:
        return self.coords[index]

    def distances_from(self, center, norm: str = "l1") -> np.ndarray:
        """Distance of every site from `center` (a coordinate or site index)."""
        if np.isscalar(center):
            center_coord = self.coords[int(center)]
        else:
            center_coord = np.asarray(center, dtype=np.int64)
        delta = self.coords - center_coord
        if self.bc == "periodic":
            delta = np.abs(delta)
            delta = np.minimum(delta, self.L - delta)
        return _coordinate_distance(delta, norm)

    def boundary_margin(self, coord) -> int:
        """Smallest axis distance from `coord` to the box boundary (open bc)."""
        coord = np.asarray(coord, dtype=np.int64)
        lo = coord + self.L // 2
        hi = (self.L - 1) - lo
        return int(min(lo.min(), hi.min()))


@dataclass(frozen=True)
class Region:
    """Boolean site mask on a box, tagged with how it was produced."""

    box: LatticeBox
    mask: np.ndarray = field(repr=False)
    label: str
    clipped: bool = False

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def complement(self) -> "Region":
        label = f"complement({self.label})"
        return Region(self.box, ~self.mask, label, clipped=self.clipped)


def build_box(d: int, L: int, bc: str = "open",
              site_budget: int = DEFAULT_SITE_BUDGET) -> LatticeBox:
    """Construct a finite box with neighbor lists and a centered origin.

    Raises
    ------
    SiteBudgetError
        If L**d exceeds `site_budget`.
    ValueError
        For non-positive d or L, or an unknown boundary condition.
    """
    if d < 1 or L < 1:
        raise ValueError("d and L must be >= 1")
    if bc not in ("open", "periodic"):
        raise ValueError(f"unknown boundary condition {bc!r}")
    n_sites = L**d
    if n_sites > site_budget:
        raise SiteBudgetError(
            f"box with {n_sites} sites exceeds budget {site_budget}")

    multi = np.indices((L,) * d).reshape(d, n_sites).T  # row-major
    coords = (multi - L // 2).astype(np.int64)

    strides = np.array([L ** (d - 1 - k) for k in range(d)], dtype=np.int64)
    neighbors = []
    for i in range(n_sites):
        nb = set()
        for axis in range(d):
            for step in (-1, 1):
                m = multi[i].copy()
                m[axis] += step
                if bc == "periodic":
                    m[axis] %= L
                elif not (0 <= m[axis] < L):
                    continue
                j = int(m @ strides)
                if j != i:
                    nb.add(j)
        neighbors.append(np.array(sorted(nb), dtype=np.int64))

    origin_index = int((np.full(d, L // 2, dtype=np.int64)) @ strides)
    return LatticeBox(d=d, L=L, bc=bc, coords=coords,
                      neighbors=tuple(neighbors), origin_index=origin_index)


def ball_region(box: LatticeBox, r: int, center=None,
                norm: str = "l1") -> Region:
    """Sites within distance r of `center` (default: the origin).

    The ball may be clipped by the box boundary; the returned region is
    flagged `clipped` in that case so downstream fits can refuse it.
    """
    if r < 0:
        raise ValueError("radius must be >= 0")
    if center is None:
        center_coord = box.coords[box.origin_index]
    elif np.isscalar(center):
        center_coord = box.coords[int(center)]
    else:
        center_coord = np.asarray(center, dtype=np.int64)
        box.index_of(center_coord)  # validates that the center lies inside

    dist = box.distances_from(center_coord, norm=norm)
    mask = dist <= r

    clipped = False
    if box.bc == "open":
        # Unclipped iff the ideal Z^d ball fits: center at axis distance >= r
        # from every face.
        clipped = box.boundary_margin(center_coord) < r
    else:
        clipped = 2 * r + 1 > box.L

    return Region(box, mask, label=f"ball({r})", clipped=clipped)
