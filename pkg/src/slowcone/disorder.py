"""Disordered potentials: i.i.d. uniform and quasi-periodic families.

Random potentials are generated with a counter-based hash keyed by
(seed, site coordinate), so a site's value never depends on traversal
order or box size: extracting a centered sub-box reproduces the same
values, and ensemble members can be generated concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lattice import LatticeBox, build_box

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_U64 = 0xFFFFFFFFFFFFFFFF

# Default quasi-periodic frequencies: golden ratio for the first axis,
# then sqrt(2)-1 and sqrt(3)-1 fractional parts for higher axes.
GOLDEN_MEAN = (np.sqrt(5.0) - 1.0) / 2.0
DEFAULT_ALPHAS = (GOLDEN_MEAN, np.sqrt(2.0) - 1.0, np.sqrt(3.0) - 1.0)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1) & np.uint64(_U64)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2) & np.uint64(_U64)
    return z ^ (z >> np.uint64(31))


def site_uniform01(seed: int, coords: np.ndarray) -> np.ndarray:
    """Uniform[0,1) draw per coordinate row, a pure function of (seed, row).

    splitmix64-style avalanche over the seed and the folded coordinates;
    the top 53 bits feed the mantissa.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
    with np.errstate(over="ignore"):
        h = np.full(coords.shape[0], np.uint64(seed & _U64))
        h = _mix64(h ^ np.uint64(_GOLDEN))
        for k in range(coords.shape[1]):
            c = coords[:, k].astype(np.int64).view(np.uint64)
            h = _mix64(h ^ ((c + np.uint64(_GOLDEN)) & np.uint64(_U64)))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0**-53)


@dataclass(frozen=True)
class Potential:
    """Per-site real values with full reproducibility provenance."""

    box: LatticeBox
    values: np.ndarray = field(repr=False)
    provenance: dict

    def to_json(self, include_values: bool = False) -> str:
        payload = {
            "provenance": self.provenance,
            "d": self.box.d,
            "L": self.box.L,
            "bc": self.box.bc,
        }
        if include_values or self.provenance.get("family") == "explicit":
            payload["values"] = [float(v) for v in self.values]
        return json.dumps(payload, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Potential":
        payload = json.loads(text)
        box = build_box(payload["d"], payload["L"], payload.get("bc", "open"))
        prov = payload["provenance"]
        family = prov.get("family")
        if family == "random":
            return sample_random_potential(box, int(prov["seed"]))
        if family == "quasiperiodic":
            return quasiperiodic_potential(box, float(prov["theta"]),
                                           np.asarray(prov["alpha"], dtype=float))
        if family == "explicit":
            values = np.asarray(payload["values"], dtype=np.float64)
            if values.shape[0] != box.site_count:
                raise ValueError("explicit values do not match the box")
            return Potential(box, values, {"family": "explicit"})
        raise ValueError(f"unknown potential family {family!r}")


def sample_random_potential(box: LatticeBox, seed: int) -> Potential:
    """i.i.d. Uniform[0,1] per site, keyed by (seed, site coordinate)."""
    values = site_uniform01(int(seed), box.coords)
    return Potential(box, values, {"family": "random", "seed": int(seed)})


def quasiperiodic_potential(box: LatticeBox, theta: float, alpha) -> Potential:
    """v(x) = cos(2 pi (theta + x . alpha)) at every site coordinate x."""
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if alpha.shape != (box.d,):
        raise ValueError(f"alpha must have {box.d} components")
    if not (0.0 <= theta <= 1.0):
        raise ValueError("theta must lie in [0, 1]")
    if np.any(alpha < 0.0) or np.any(alpha > 1.0):
        raise ValueError("alpha components must lie in [0, 1]")
    phase = theta + box.coords.astype(np.float64) @ alpha
    values = np.cos(2.0 * np.pi * phase)
    return Potential(box, values, {
        "family": "quasiperiodic",
        "theta": float(theta),
        "alpha": [float(a) for a in alpha],
    })


def explicit_potential(box: LatticeBox, values) -> Potential:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (box.site_count,):
        raise ValueError("values must assign one real per site")
    return Potential(box, values, {"family": "explicit"})


def diophantine_score(alpha, denominator_bound: int,
                      enumeration_budget: int = 5_000_000) -> float:
    """Finite proxy for the Diophantine quality of a frequency vector.

    Returns min over integer vectors k with 0 < ||k||_inf <= bound of
    dist(k . alpha, Z) * ||k||_inf**(d+1). Larger means harder to
    approximate by rationals; exactly 0 for rational alpha once the bound
    reaches a denominator.
    """
    if denominator_bound < 1:
        raise ValueError("denominator_bound must be >= 1")
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    d = alpha.shape[0]
    if (2 * denominator_bound + 1) ** d - 1 > enumeration_budget:
        raise ValueError("enumeration over k exceeds the configured budget")

    rng = np.arange(-denominator_bound, denominator_bound + 1, dtype=np.int64)
    grids = np.meshgrid(*([rng] * d), indexing="ij")
    k = np.stack([g.ravel() for g in grids], axis=1)
    norms = np.abs(k).max(axis=1)
    k = k[norms > 0]
    norms = norms[norms > 0]
    frac = k.astype(np.float64) @ alpha
    dist = np.abs(frac - np.round(frac))
    return float(np.min(dist * norms.astype(np.float64) ** (d + 1)))
