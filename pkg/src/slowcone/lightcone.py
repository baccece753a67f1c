"""Front-arrival extraction and velocity fitting for propagation series.

Everything here is a pure function of already-measured time series;
experiment orchestration lives in the harness. Velocities come from
least-squares fits of arrival time against travel distance, and the
disorder scan aggregates ensemble medians and a c/log(lambda) trend fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .output import polyline_svg, write_csv

DEFAULT_FLUCT_THRESHOLD = 1e-3
DEFAULT_MASS_THRESHOLD = 1e-4


@dataclass
class FrontSeries:
    """A monitored signal m(t) at one observation ball."""

    source: str                 # hartree_mass | bogoliubov_fluct | exact_fluct
    r: int                      # observation radius
    R: int                      # exclusion radius of the initial support
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    meta: dict = field(default_factory=dict)
    clipped: bool = False

    @property
    def rho(self) -> int:
        return self.R - self.r

    def validate(self) -> None:
        if len(self.times) == 0:
            raise ValueError("empty front series")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(~np.isfinite(self.values)) or np.any(self.values < -1e-8):
            raise ValueError("series values must be finite and >= -1e-8")


def front_arrival(series: FrontSeries, threshold: float):
    """First time the series reaches `threshold`, linearly interpolated
    between samples; None if it never does."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    series.validate()
    vals = series.values
    above = np.nonzero(vals >= threshold)[0]
    if above.size == 0:
        return None
    i = int(above[0])
    if i == 0:
        return float(series.times[0])
    t0, t1 = series.times[i - 1], series.times[i]
    v0, v1 = vals[i - 1], vals[i]
    return float(t0 + (threshold - v0) / (v1 - v0) * (t1 - t0))


@dataclass
class VelocityFit:
    """Fitted front velocity from (distance, arrival time) pairs."""

    rhos: np.ndarray = field(repr=False)
    arrivals: np.ndarray = field(repr=False)
    velocity: float | None
    intercept: float
    residual: float
    flags: list = field(default_factory=list)


def velocity_fit(arrivals) -> VelocityFit:
    """Least squares of t* = rho / v + c over arrival points.

    Requires at least 3 points with distinct rho. A non-positive fitted
    slope is flagged instead of reported as a velocity.
    """
    pts = [(float(r), float(t)) for r, t in arrivals if t is not None]
    if len(pts) < 3:
        raise ValueError("need at least 3 arrival points")
    rhos = np.array([p[0] for p in pts])
    ts = np.array([p[1] for p in pts])
    if np.unique(rhos).size < 2:
        raise ValueError("arrival distances are degenerate")
    slope, intercept = np.polyfit(rhos, ts, 1)
    resid = ts - (slope * rhos + intercept)
    rms = float(np.sqrt(np.mean(resid**2)))
    if slope <= 0:
        return VelocityFit(rhos=rhos, arrivals=ts, velocity=None,
                           intercept=float(intercept), residual=rms,
                           flags=["non-positive slope: no finite velocity"])
    return VelocityFit(rhos=rhos, arrivals=ts, velocity=float(1.0 / slope),
                       intercept=float(intercept), residual=rms, flags=[])


def member_velocity(series_list, threshold: float,
                    robustness_factor: float = 10.0):
    """Velocity of one ensemble member from its per-radius series.

    Returns (VelocityFit or None, flags). The fit is refused outright for
    clipped observation balls; a threshold-robustness check (threshold
    scaled up and down by `robustness_factor`, velocity shift < 20%)
    flags shallow fronts without hiding them.
    """
    flags = []
    for s in series_list:
        if s.clipped:
            raise ValueError(
                f"observation ball r={s.r} is clipped; refusing the fit")
    arrivals = [(s.rho, front_arrival(s, threshold)) for s in series_list]
    usable = [(r, t) for r, t in arrivals if t is not None]
    if len(usable) < 3:
        flags.append(f"only {len(usable)} arrivals within horizon")
        return None, flags
    fit = velocity_fit(usable)
    if fit.velocity is None:
        return fit, fit.flags

    for factor in (robustness_factor, 1.0 / robustness_factor):
        alt = [(s.rho, front_arrival(s, threshold * factor))
               for s in series_list]
        alt_usable = [(r, t) for r, t in alt if t is not None]
        if len(alt_usable) < 3:
            flags.append(f"threshold x{factor:g}: too few arrivals")
            continue
        alt_fit = velocity_fit(alt_usable)
        if alt_fit.velocity is None:
            flags.append(f"threshold x{factor:g}: degenerate fit")
            continue
        change = abs(alt_fit.velocity - fit.velocity) / fit.velocity
        if change > 0.20:
            flags.append(
                f"threshold x{factor:g} moves velocity by {change:.0%}")
    return fit, flags


@dataclass
class ScanRow:
    lam: float
    v_median: float | None
    v_q25: float | None
    v_q75: float | None
    n_members: int
    n_fitted: int
    flags: list = field(default_factory=list)


@dataclass
class ScanTable:
    rows: list
    c_over_log: float | None
    fit_r2: float | None
    monotone_decreasing: bool

    def to_csv(self, path) -> None:
        out = []
        for row in self.rows:
            out.append((row.lam,
                        float("nan") if row.v_median is None else row.v_median,
                        float("nan") if row.v_q25 is None else row.v_q25,
                        float("nan") if row.v_q75 is None else row.v_q75,
                        float("nan") if self.c_over_log is None
                        else self.c_over_log,
                        float("nan") if self.fit_r2 is None else self.fit_r2))
        write_csv(path, ("lambda", "v_median", "v_q25", "v_q75",
                         "c_over_log_fit", "r2"), out)

    def to_svg(self, path) -> None:
        xs = [row.lam for row in self.rows if row.v_median is not None]
        ys = [row.v_median for row in self.rows if row.v_median is not None]
        polyline_svg(path, xs, ys, xlabel="disorder strength (log scale)",
                     ylabel="front velocity (median)",
                     title="fitted front velocity vs disorder", logx=True)


def epsilon_scan(lambda_list, run_member, ensemble_size: int,
                 threshold: float = DEFAULT_FLUCT_THRESHOLD,
                 min_ensemble: int = 8) -> ScanTable:
    """Ensemble velocity scan over disorder strengths.

    `run_member(lam, member_index)` must return the per-radius FrontSeries
    of one realization. Rows report ensemble medians and quartiles; for
    lambda > 1 the medians are fitted against 1/log(lambda).
    """
    lambda_list = list(lambda_list)
    if not lambda_list:
        raise ValueError("lambda_list is empty")
    if len(lambda_list) > 1 and ensemble_size < min_ensemble:
        raise ValueError(
            f"ensemble size {ensemble_size} below minimum {min_ensemble}")

    rows = []
    for lam in lambda_list:
        velocities = []
        flags = []
        for member in range(ensemble_size):
            series_list = run_member(lam, member)
            fit, member_flags = member_velocity(series_list, threshold)
            flags.extend(f"member {member}: {f}" for f in member_flags)
            if fit is not None and fit.velocity is not None:
                velocities.append(fit.velocity)
        if velocities:
            arr = np.asarray(velocities)
            rows.append(ScanRow(
                lam=float(lam), v_median=float(np.median(arr)),
                v_q25=float(np.quantile(arr, 0.25)),
                v_q75=float(np.quantile(arr, 0.75)),
                n_members=ensemble_size, n_fitted=len(velocities),
                flags=flags))
        else:
            rows.append(ScanRow(lam=float(lam), v_median=None, v_q25=None,
                                v_q75=None, n_members=ensemble_size,
                                n_fitted=0,
                                flags=flags + ["no member produced a fit"]))

    fit_rows = [r for r in rows if r.lam > 1.0 and r.v_median is not None]
    c = r2 = None
    if len(fit_rows) >= 2:
        x = np.array([1.0 / math.log(r.lam) for r in fit_rows])
        y = np.array([r.v_median for r in fit_rows])
        c = float((x @ y) / (x @ x))
        ss_res = float(np.sum((y - c * x) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    medians = [r.v_median for r in rows if r.v_median is not None]
    monotone = all(b < a for a, b in zip(medians, medians[1:]))
    return ScanTable(rows=rows, c_over_log=c, fit_r2=r2,
                     monotone_decreasing=monotone and len(medians) == len(rows))
