"""Config-driven experiment orchestration: validation, ensembles, reports.

A single TOML file describes one experiment (kind + lattice + potential +
dynamics + geometry + ensemble + output). Unknown keys are hard errors:
a silent typo would invalidate an expensive ensemble. Ensemble members
are pure functions of (config, member seed), run on a thread pool, and
write only inside their own member directory, so reruns are byte
identical at any worker count.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .bogoliubov import evolve_fluctuations
from .disorder import (DEFAULT_ALPHAS, Potential, quasiperiodic_potential,
                       sample_random_potential, site_uniform01)
from .errors import ConfigError, SlowconeError
from .exactfock import (FockBasis, FockState, build_fock_hamiltonian,
                        evolve_fock, fluctuation_numbers, meanfield_error,
                        one_rdm, product_state)
from .hartree import c2_scan, hartree_evolve
from .lattice import LatticeBox, ball_region, build_box
from .lightcone import (DEFAULT_FLUCT_THRESHOLD, FrontSeries, epsilon_scan,
                        front_arrival, member_velocity)
from .onebody import WaveFunction, assemble_hamiltonian, sudl_profile
from .output import write_csv, write_json, write_json_atomic

KINDS = ("sudl", "hartree", "bogoliubov", "exact", "scan")

_MISSING = object()


def _schema():
    """Allowed keys, defaults (None = optional), per section."""
    return {
        "kind": _MISSING,
        "lattice": {"d": 1, "L": _MISSING, "bc": "open", "norm": "l1"},
        "potential": {"family": "quasiperiodic", "lambda": 0.0,
                      "lambda_list": None, "alpha": None, "theta": None,
                      "seed": None},
        "dynamics": {"U": 0.0, "dt": 0.01, "t_final": 10.0,
                     "sample_every": 1, "tol": 1e-10},
        "geometry": {"r": None, "R": None, "radii": None, "eps": None,
                     "M": None, "expected_velocity": 2.0,
                     "phi0": {"kind": None, "center": None, "width": 1.0,
                              "cutoff": 3.0, "site": None, "path": None}},
        "sudl": {"t_max": 20.0, "dt": 0.1, "fit_rmin": 1, "fit_rmax": 8},
        "bogoliubov": {"dt": None, "sample_every": 10,
                       "pairing": "orthogonal", "projected": True,
                       "ccr_abort": 1e-6, "early_stop": True},
        "exact": {"N": None, "nnz_budget": 5_000_000, "obs_every": 10},
        "lightcone": {"threshold": None, "min_ensemble": 8,
                      "horizons": None, "expected_velocities": None},
        "ensemble": {"size": 1, "base_seed": 0},
        "output": {"directory": "out", "formats": ["csv", "json"]},
    }


@dataclass
class ExperimentConfig:
    """Validated, normalized experiment description."""

    data: dict

    @property
    def kind(self) -> str:
        return self.data["kind"]

    def __getitem__(self, key):
        return self.data[key]

    def config_hash(self) -> str:
        canon = json.dumps(self.data, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _walk_unknown(raw, schema, path, problems):
    if not isinstance(raw, dict):
        problems.append(f"{path or '<root>'}: expected a table")
        return
    for key, value in raw.items():
        if key not in schema:
            problems.append(f"{path + key}: unknown key")
            continue
        sub = schema[key]
        if isinstance(sub, dict) and isinstance(value, dict):
            _walk_unknown(value, sub, path + key + ".", problems)


def _merge_defaults(raw, schema):
    out = {}
    for key, default in schema.items():
        if isinstance(default, dict):
            out[key] = _merge_defaults(raw.get(key, {}), default)
        elif key in raw:
            out[key] = raw[key]
        elif default is _MISSING:
            out[key] = None
        else:
            out[key] = default
    return out


def load_config(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def validate_config(raw: dict) -> ExperimentConfig:
    """Check invariants, fill defaults, and return the normalized config.

    Raises ConfigError listing every violation with its config path.
    """
    problems: list = []
    _walk_unknown(raw, _schema(), "", problems)
    cfg = _merge_defaults(raw, _schema())
    if problems:
        raise ConfigError(problems)

    kind = cfg.get("kind")
    if kind not in KINDS:
        problems.append(f"kind: must be one of {KINDS}, got {kind!r}")
        raise ConfigError(problems)

    lat = cfg["lattice"]
    if lat["L"] is None:
        problems.append("lattice.L: required")
    elif lat["L"] < 1 or lat["d"] < 1:
        problems.append("lattice.L and lattice.d must be >= 1")
    if lat["bc"] not in ("open", "periodic"):
        problems.append("lattice.bc: must be 'open' or 'periodic'")
    if lat["norm"] not in ("l1", "linf"):
        problems.append("lattice.norm: must be 'l1' or 'linf'")

    pot = cfg["potential"]
    if pot["family"] not in ("quasiperiodic", "random"):
        problems.append("potential.family: must be quasiperiodic or random")
    if pot["family"] == "quasiperiodic" and pot["alpha"] is None and \
            lat["d"] is not None and lat["d"] >= 1:
        d = int(lat["d"] or 1)
        if d > len(DEFAULT_ALPHAS):
            problems.append("potential.alpha: required for d > 3")
        else:
            pot["alpha"] = [float(a) for a in DEFAULT_ALPHAS[:d]]
    if kind == "scan":
        if not pot["lambda_list"]:
            problems.append("potential.lambda_list: required for scan")
    elif pot["lambda"] is None:
        problems.append("potential.lambda: required")

    dyn = cfg["dynamics"]
    if dyn["dt"] <= 0 or dyn["t_final"] < 0 or dyn["tol"] <= 0:
        problems.append("dynamics: dt and tol must be > 0, t_final >= 0")
    if dyn["sample_every"] < 1:
        problems.append("dynamics.sample_every: must be >= 1")

    geo = cfg["geometry"]
    needs_phi0 = kind in ("hartree", "bogoliubov", "exact", "scan")
    if needs_phi0 and geo["phi0"]["kind"] not in ("bump", "delta", "file"):
        problems.append("geometry.phi0.kind: must be bump, delta, or file")

    cone_kind = kind in ("hartree", "bogoliubov", "scan")
    if kind == "hartree":
        for key in ("r", "R", "eps", "M"):
            if geo[key] is None:
                problems.append(f"geometry.{key}: required for hartree runs")
    if kind in ("bogoliubov", "scan"):
        if not geo["radii"]:
            problems.append("geometry.radii: required (observation balls)")
        if geo["R"] is None:
            problems.append("geometry.R: required (initial exclusion zone)")
        if geo["radii"] and len(geo["radii"]) < 3:
            problems.append("geometry.radii: need >= 3 radii for a velocity fit")
    if kind == "exact":
        if cfg["exact"]["N"] is None:
            problems.append("exact.N: required")
        if geo["r"] is None:
            problems.append("geometry.r: required for exact runs")

    # Theorem-style geometry: R >= 2r for every observation radius.
    if cone_kind and geo["R"] is not None:
        radii = geo["radii"] if geo["radii"] else (
            [geo["r"]] if geo["r"] is not None else [])
        for r in radii:
            if geo["R"] < 2 * r:
                problems.append(
                    f"geometry: R >= 2r violated (r={r}, R={geo['R']})")

    if kind == "scan":
        if cfg["ensemble"]["size"] < cfg["lightcone"]["min_ensemble"]:
            problems.append(
                f"ensemble.size: scan needs >= {cfg['lightcone']['min_ensemble']}"
                " members")
        for key in ("horizons", "expected_velocities"):
            values = cfg["lightcone"][key]
            if values is not None and pot["lambda_list"] and \
                    len(values) != len(pot["lambda_list"]):
                problems.append(
                    f"lightcone.{key}: must align with potential.lambda_list")

    if problems:
        raise ConfigError(problems)

    # Geometry checks that need the actual box and initial state.
    box = build_box(int(lat["d"]), int(lat["L"]), lat["bc"])
    if needs_phi0:
        phi0 = build_phi0(cfg, box)
        support = np.nonzero(np.abs(phi0.amplitudes) > 0)[0]
        dist = box.distances_from(box.origin_index, norm=lat["norm"])
        min_dist = int(dist[support].min())
        if geo["R"] is not None and min_dist <= geo["R"]:
            problems.append(
                f"geometry.phi0: support intersects B_R (closest site at"
                f" distance {min_dist}, R={geo['R']})")

        if cone_kind:
            horizons = [float(dyn["t_final"])]
            vels = [float(geo["expected_velocity"])]
            if kind == "scan":
                lam_list = pot["lambda_list"]
                horizons = cfg["lightcone"]["horizons"] or \
                    [float(dyn["t_final"])] * len(lam_list)
                vels = cfg["lightcone"]["expected_velocities"] or \
                    [float(geo["expected_velocity"])] * len(lam_list)
            radii = geo["radii"] if geo["radii"] else [geo["r"]]
            r_max = max(radii)
            support_margin = min(
                box.boundary_margin(box.coords[i]) for i in support)
            origin_margin = box.boundary_margin(box.coords[box.origin_index])
            for horizon, vel in zip(horizons, vels):
                front = vel * horizon
                if origin_margin < r_max + front + 10:
                    problems.append(
                        "lattice.L: padding rule violated at the observation"
                        f" balls (margin {origin_margin} <"
                        f" {r_max} + {front:g} + 10)")
                    break
                if support_margin < front + 10:
                    problems.append(
                        "lattice.L: padding rule violated at the initial"
                        f" support (margin {support_margin} < {front:g} + 10)")
                    break

    if kind == "exact" and cfg["exact"]["N"] is not None:
        import math as _math
        dim = _math.comb(int(cfg["exact"]["N"]) + box.site_count - 1,
                         int(cfg["exact"]["N"]))
        est = dim * (1 + 2 * box.edge_count)
        if est > cfg["exact"]["nnz_budget"]:
            problems.append(
                f"exact.N: estimated {est} nonzeros exceeds budget"
                f" {cfg['exact']['nnz_budget']}")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(data=cfg)


def build_phi0(cfg: dict, box: LatticeBox) -> WaveFunction:
    spec = cfg["geometry"]["phi0"]
    kind = spec["kind"]
    if kind == "bump":
        if spec["center"] is None:
            raise ConfigError(["geometry.phi0.center: required for bump"])
        center = spec["center"]
        center = [center] if np.isscalar(center) else list(center)
        return WaveFunction.bump(box, np.asarray(center, dtype=np.int64),
                                 float(spec["width"]),
                                 cutoff=float(spec["cutoff"]),
                                 norm=cfg["lattice"]["norm"])
    if kind == "delta":
        site = spec["site"]
        if site is None:
            raise ConfigError(["geometry.phi0.site: required for delta"])
        site = [site] if np.isscalar(site) else list(site)
        return WaveFunction.delta(box, np.asarray(site, dtype=np.int64))
    if kind == "file":
        with open(spec["path"]) as fh:
            payload = json.load(fh)
        amp = np.asarray(payload["re"], dtype=float) \
            + 1j * np.asarray(payload.get("im", np.zeros(len(payload["re"]))),
                              dtype=float)
        wf = WaveFunction(box, amp)
        return wf.normalized()
    raise ConfigError([f"geometry.phi0.kind: unknown kind {kind!r}"])


def member_theta(base_seed: int, member: int) -> float:
    return float(site_uniform01(base_seed + member, np.array([[0]]))[0])


def member_potential(cfg: dict, box: LatticeBox, member: int,
                     lam_override=None) -> tuple:
    """(Potential, lambda, seed_record) for one ensemble member."""
    pot = cfg["potential"]
    seed = int(cfg["ensemble"]["base_seed"]) + member
    lam = float(pot["lambda"] if lam_override is None else lam_override)
    if pot["family"] == "random":
        base = pot["seed"] if pot["seed"] is not None else \
            cfg["ensemble"]["base_seed"]
        potential = sample_random_potential(box, int(base) + member)
    else:
        theta = pot["theta"] if pot["theta"] is not None \
            else member_theta(int(cfg["ensemble"]["base_seed"]), member)
        potential = quasiperiodic_potential(
            box, float(theta), np.asarray(pot["alpha"], dtype=float))
    return potential, lam, seed


def _sidecar_base(cfg: ExperimentConfig, member: int, potential: Potential,
                  lam: float, seed: int) -> dict:
    return {
        "code_version": __version__,
        "config_hash": cfg.config_hash(),
        "seeds": {"base_seed": int(cfg["ensemble"]["base_seed"]),
                  "member": member, "member_seed": seed},
        "lambda": lam,
        "provenance": potential.provenance,
    }


# ---------------------------------------------------------------------------
# member runners


def _run_sudl_member(cfg: ExperimentConfig, member: int, out_dir: str) -> dict:
    lat, sud = cfg["lattice"], cfg["sudl"]
    box = build_box(int(lat["d"]), int(lat["L"]), lat["bc"])
    potential, lam, seed = member_potential(cfg.data, box, member)
    h = assemble_hamiltonian(box, potential, lam)
    t_grid = np.arange(0.0, float(sud["t_max"]) + 1e-12, float(sud["dt"]))
    window = (int(sud["fit_rmin"]), int(sud["fit_rmax"]))
    if ball_region(box, window[1], norm=lat["norm"]).clipped:
        raise ConfigError([f"sudl.fit_rmax: ball({window[1]}) is clipped"])
    profile = sudl_profile(h, box.origin_index, t_grid, window,
                           norm=lat["norm"], tol=float(cfg["dynamics"]["tol"]))
    csv_path = os.path.join(out_dir, "profile.csv")
    json_path = os.path.join(out_dir, "profile.json")
    profile.to_csv(csv_path)
    extra = _sidecar_base(cfg, member, potential, lam, seed)
    profile.sidecar(json_path, **extra)
    return {"outputs": [csv_path, json_path],
            "metrics": {"gamma": profile.gamma,
                        "residual": profile.residual}}


def _run_hartree_member(cfg: ExperimentConfig, member: int,
                        out_dir: str) -> dict:
    lat, dyn, geo = cfg["lattice"], cfg["dynamics"], cfg["geometry"]
    box = build_box(int(lat["d"]), int(lat["L"]), lat["bc"])
    potential, lam, seed = member_potential(cfg.data, box, member)
    h = assemble_hamiltonian(box, potential, lam)
    phi0 = build_phi0(cfg.data, box)
    horizon = (float(geo["R"]) - float(geo["r"])) / float(geo["eps"])
    t_final = max(float(dyn["t_final"]), horizon)
    traj = hartree_evolve(h, float(dyn["U"]), phi0, t_final,
                          float(dyn["dt"]),
                          sample_every=int(dyn["sample_every"]),
                          tol=float(dyn["tol"]))
    report = c2_scan(traj, int(geo["r"]), int(geo["R"]), float(geo["eps"]),
                     float(geo["M"]), norm=lat["norm"])
    csv_path = os.path.join(out_dir, "c2.csv")
    json_path = os.path.join(out_dir, "c2.json")
    report.to_csv(csv_path)
    extra = _sidecar_base(cfg, member, potential, lam, seed)
    extra["U"] = float(dyn["U"])
    report.sidecar(json_path, **extra)
    return {"outputs": [csv_path, json_path],
            "metrics": {"peak_mass": report.peak,
                        "passed": report.passed}}


def _cone_series(cfg: ExperimentConfig, member: int, lam_override=None,
                 horizon=None):
    """Shared bogoliubov front pipeline: returns (history, series, box,
    potential, lam, seed)."""
    lat, dyn, geo, bog = (cfg["lattice"], cfg["dynamics"], cfg["geometry"],
                          cfg["bogoliubov"])
    box = build_box(int(lat["d"]), int(lat["L"]), lat["bc"])
    potential, lam, seed = member_potential(cfg.data, box, member,
                                            lam_override=lam_override)
    h = assemble_hamiltonian(box, potential, lam)
    phi0 = build_phi0(cfg.data, box)
    t_final = float(horizon if horizon is not None else dyn["t_final"])
    fluct_dt = float(bog["dt"]) if bog["dt"] is not None \
        else 2.0 * float(dyn["dt"])
    traj = hartree_evolve(h, float(dyn["U"]), phi0, t_final,
                          fluct_dt / 2.0, sample_every=1,
                          tol=float(dyn["tol"]))
    radii = [int(r) for r in geo["radii"]]
    regions = {f"r{r}": ball_region(box, r, norm=lat["norm"]) for r in radii}
    for r in radii:
        if regions[f"r{r}"].clipped:
            raise ConfigError([f"geometry.radii: ball({r}) is clipped"])

    threshold = cfg["lightcone"]["threshold"]
    threshold = DEFAULT_FLUCT_THRESHOLD if threshold is None \
        else float(threshold)
    stop = None
    if bog["early_stop"]:
        def stop(_t, rec):
            return all(v >= 10.0 * threshold for v in rec.values())

    history = evolve_fluctuations(
        traj, fluct_dt, sample_every=int(bog["sample_every"]),
        regions=regions, projected=bool(bog["projected"]),
        pairing=str(bog["pairing"]), ccr_abort=float(bog["ccr_abort"]),
        stop_when=stop)
    series = [FrontSeries(source="bogoliubov_fluct", r=r, R=int(geo["R"]),
                          times=history.times,
                          values=history.local_numbers[f"r{r}"],
                          meta={"lambda": lam, "member": member},
                          clipped=regions[f"r{r}"].clipped)
              for r in radii]
    return history, series, potential, lam, seed


def _run_bogoliubov_member(cfg: ExperimentConfig, member: int,
                           out_dir: str) -> dict:
    history, series, potential, lam, seed = _cone_series(cfg, member)
    csv_path = os.path.join(out_dir, "fronts.csv")
    json_path = os.path.join(out_dir, "fronts.json")
    history.to_csv(csv_path)
    threshold = cfg["lightcone"]["threshold"]
    threshold = DEFAULT_FLUCT_THRESHOLD if threshold is None \
        else float(threshold)
    fit, flags = member_velocity(series, threshold)
    extra = _sidecar_base(cfg, member, potential, lam, seed)
    extra.update({
        "U": float(cfg["dynamics"]["U"]),
        "threshold": threshold,
        "arrivals": {f"r{s.r}": front_arrival(s, threshold) for s in series},
        "velocity": None if fit is None else fit.velocity,
        "flags": flags,
    })
    history.sidecar(json_path, **extra)
    metrics = {"velocity": None if fit is None else fit.velocity,
               "max_ccr_defect": float(np.max(history.ccr_defects))}
    return {"outputs": [csv_path, json_path], "metrics": metrics}


def _run_exact_member(cfg: ExperimentConfig, member: int,
                      out_dir: str) -> dict:
    lat, dyn, geo, exa = (cfg["lattice"], cfg["dynamics"], cfg["geometry"],
                          cfg["exact"])
    box = build_box(int(lat["d"]), int(lat["L"]), lat["bc"])
    potential, lam, seed = member_potential(cfg.data, box, member)
    h = assemble_hamiltonian(box, potential, lam)
    phi0 = build_phi0(cfg.data, box)
    N = int(exa["N"])
    traj = hartree_evolve(h, float(dyn["U"]), phi0, float(dyn["t_final"]),
                          float(dyn["dt"]), sample_every=1,
                          tol=float(dyn["tol"]))

    basis = FockBasis(box, N)
    H = build_fock_hamiltonian(box, potential, lam, float(dyn["U"]), N,
                               nnz_budget=int(exa["nnz_budget"]),
                               basis=basis)
    psi = product_state(phi0, N, basis=basis)
    ball = ball_region(box, int(geo["r"]), norm=lat["norm"])
    O = np.diag(ball.mask.astype(float))

    obs_dt = float(dyn["dt"]) * int(exa["obs_every"])
    n_obs = int(round(float(dyn["t_final"]) / obs_dt))
    rows = []
    t = 0.0
    for k in range(n_obs + 1):
        phi_t = traj.state_at(t).normalized()
        n_plus, n_ball = fluctuation_numbers(psi, phi_t, ball)
        err = meanfield_error(psi, phi_t, O, ball)
        energy = float(np.real(np.vdot(psi.amplitudes, H @ psi.amplitudes)))
        rows.append((t, n_plus, n_ball, err, energy, psi.norm))
        if k < n_obs:
            psi = evolve_fock(H, psi, obs_dt, tol=float(dyn["tol"]))
            t = (k + 1) * obs_dt

    csv_path = os.path.join(out_dir, "observables.csv")
    json_path = os.path.join(out_dir, "observables.json")
    write_csv(csv_path, ("t", "N_plus", "N_plus_ball", "mf_error", "energy",
                         "norm"), rows)
    extra = _sidecar_base(cfg, member, potential, lam, seed)
    extra.update({"N": N, "L": int(lat["L"]), "d": int(lat["d"]),
                  "U": float(dyn["U"]), "dt": float(dyn["dt"])})
    write_json(json_path, extra)
    final_drift = abs(rows[-1][5] - 1.0)
    return {"outputs": [csv_path, json_path],
            "metrics": {"final_norm_drift": final_drift,
                        "final_mf_error": rows[-1][3]}}


_RUNNERS = {
    "sudl": _run_sudl_member,
    "hartree": _run_hartree_member,
    "bogoliubov": _run_bogoliubov_member,
    "exact": _run_exact_member,
}


# ---------------------------------------------------------------------------
# ensemble execution


@dataclass
class RunReport:
    kind: str
    out_dir: str
    config_echo: dict
    config_hash: str
    members: list
    checks: list
    wall_time_s: float
    ok: bool

    def to_json(self, path) -> None:
        payload = {
            "kind": self.kind,
            "out_dir": self.out_dir,
            "code_version": __version__,
            "config": self.config_echo,
            "config_hash": self.config_hash,
            "members": self.members,
            "checks": self.checks,
            "wall_time_s": self.wall_time_s,
            "ok": self.ok,
        }
        write_json_atomic(path, payload)


def _member_task(runner, cfg, member, member_dir):
    os.makedirs(member_dir, exist_ok=True)
    try:
        result = runner(cfg, member, member_dir)
        return {"index": member, "status": "ok", **result}
    except (SlowconeError, ValueError) as exc:
        return {"index": member, "status": "failed", "error": str(exc),
                "outputs": []}


def run(cfg: ExperimentConfig, threads: int = 1,
        seed_override: int | None = None, out_dir: str | None = None
        ) -> RunReport:
    """Execute all ensemble members and write the run report last.

    Member outputs land in <out>/member_XXX/. Failures are isolated per
    member; the report records them and `ok` reflects the whole run.
    """
    started = time.time()
    if seed_override is not None:
        cfg = ExperimentConfig(data=json.loads(json.dumps(cfg.data)))
        cfg.data["ensemble"]["base_seed"] = int(seed_override)
    if out_dir is None:
        out_dir = cfg["output"]["directory"]
    os.makedirs(out_dir, exist_ok=True)

    if cfg.kind == "scan":
        return _run_scan(cfg, threads, out_dir, started)

    runner = _RUNNERS[cfg.kind]
    size = int(cfg["ensemble"]["size"])
    members = [None] * size
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) \
            as pool:
        futures = {
            pool.submit(_member_task, runner, cfg, m,
                        os.path.join(out_dir, f"member_{m:03d}")): m
            for m in range(size)}
        for fut in concurrent.futures.as_completed(futures):
            res = fut.result()
            members[res["index"]] = res

    checks = _run_checks(cfg, members)
    ok = all(m["status"] == "ok" for m in members) and \
        all(c["passed"] for c in checks)
    report = RunReport(kind=cfg.kind, out_dir=out_dir,
                       config_echo=cfg.data, config_hash=cfg.config_hash(),
                       members=members, checks=checks,
                       wall_time_s=time.time() - started, ok=ok)
    _write_summary(cfg, members, out_dir)
    report.to_json(os.path.join(out_dir, "report.json"))
    return report


def _run_checks(cfg: ExperimentConfig, members) -> list:
    checks = []
    ok_members = [m for m in members if m["status"] == "ok"]
    if cfg.kind == "bogoliubov":
        worst = max((m["metrics"]["max_ccr_defect"] for m in ok_members),
                    default=0.0)
        checks.append({"name": "ccr_defect_below_1e-8",
                       "passed": worst <= 1e-8,
                       "detail": f"max defect {worst:.3e}"})
    if cfg.kind == "exact":
        worst = max((m["metrics"]["final_norm_drift"] for m in ok_members),
                    default=0.0)
        checks.append({"name": "norm_drift_below_tol",
                       "passed": worst <= 10 * float(cfg["dynamics"]["tol"]),
                       "detail": f"max drift {worst:.3e}"})
    if cfg.kind == "hartree":
        checks.append({
            "name": "c2_threshold",
            "passed": all(m["metrics"]["passed"] for m in ok_members),
            "detail": "peak mass below exp(-M rho/eps) for every member"})
    return checks


def _write_summary(cfg: ExperimentConfig, members, out_dir: str) -> None:
    ok_members = [m for m in members if m["status"] == "ok"]
    if cfg.kind == "sudl" and ok_members:
        gammas = np.array([m["metrics"]["gamma"] for m in ok_members])
        write_csv(os.path.join(out_dir, "summary.csv"),
                  ("lambda", "gamma_median", "gamma_q25", "gamma_q75",
                   "n_members"),
                  [(float(cfg["potential"]["lambda"]),
                    float(np.median(gammas)),
                    float(np.quantile(gammas, 0.25)),
                    float(np.quantile(gammas, 0.75)), len(gammas))])


def _run_scan(cfg: ExperimentConfig, threads: int, out_dir: str,
              started: float) -> RunReport:
    lam_list = [float(x) for x in cfg["potential"]["lambda_list"]]
    size = int(cfg["ensemble"]["size"])
    horizons = cfg["lightcone"]["horizons"] or \
        [float(cfg["dynamics"]["t_final"])] * len(lam_list)
    threshold = cfg["lightcone"]["threshold"]
    threshold = DEFAULT_FLUCT_THRESHOLD if threshold is None \
        else float(threshold)

    tasks = {}
    results = {}
    members = []

    def job(li, lam, member):
        member_dir = os.path.join(out_dir, f"lambda_{li:02d}",
                                  f"member_{member:03d}")
        os.makedirs(member_dir, exist_ok=True)
        history, series, potential, lam_val, seed = _cone_series(
            cfg, member, lam_override=lam, horizon=horizons[li])
        history.to_csv(os.path.join(member_dir, "fronts.csv"))
        extra = _sidecar_base(cfg, member, potential, lam_val, seed)
        extra["threshold"] = threshold
        history.sidecar(os.path.join(member_dir, "fronts.json"), **extra)
        return series

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) \
            as pool:
        for li, lam in enumerate(lam_list):
            for member in range(size):
                tasks[pool.submit(job, li, lam, member)] = (li, lam, member)
        for fut in concurrent.futures.as_completed(tasks):
            li, lam, member = tasks[fut]
            try:
                results[(li, member)] = fut.result()
                members.append({"index": f"lambda{li}/m{member}",
                                "status": "ok", "outputs": []})
            except (SlowconeError, ValueError) as exc:
                results[(li, member)] = exc
                members.append({"index": f"lambda{li}/m{member}",
                                "status": "failed", "error": str(exc),
                                "outputs": []})

    members.sort(key=lambda m: str(m["index"]))

    def cached_runner(lam, member):
        li = lam_list.index(lam)
        res = results[(li, member)]
        if isinstance(res, Exception):
            raise res
        return res

    table = epsilon_scan(lam_list, cached_runner, size, threshold=threshold,
                         min_ensemble=int(cfg["lightcone"]["min_ensemble"]))
    table.to_csv(os.path.join(out_dir, "scan.csv"))
    if "svg" in cfg["output"]["formats"]:
        table.to_svg(os.path.join(out_dir, "scan.svg"))

    checks = [{"name": "velocity_monotone_decreasing",
               "passed": table.monotone_decreasing,
               "detail": "ensemble medians strictly decreasing in lambda"}]
    ok = all(m["status"] == "ok" for m in members) and \
        all(c["passed"] for c in checks)
    report = RunReport(kind="scan", out_dir=out_dir, config_echo=cfg.data,
                       config_hash=cfg.config_hash(), members=members,
                       checks=checks, wall_time_s=time.time() - started,
                       ok=ok)
    report.to_json(os.path.join(out_dir, "report.json"))
    return report


# ---------------------------------------------------------------------------
# summaries


def ensemble_summary(series_list):
    """Median and quartiles across members on a shared grid.

    `series_list` holds (times, values) pairs, one per member. Grids must
    agree exactly; rows are (t, median, q25, q75, n_members).
    """
    if not series_list:
        raise ValueError("need at least one member")
    times0 = np.asarray(series_list[0][0], dtype=float)
    stack = []
    for times, values in series_list:
        times = np.asarray(times, dtype=float)
        if times.shape != times0.shape or not np.allclose(times, times0,
                                                          rtol=0, atol=1e-12):
            raise ValueError("inconsistent grids across members")
        stack.append(np.asarray(values, dtype=float))
    data = np.vstack(stack)
    rows = []
    for j, t in enumerate(times0):
        col = data[:, j]
        rows.append((float(t), float(np.median(col)),
                     float(np.quantile(col, 0.25)),
                     float(np.quantile(col, 0.75)), data.shape[0]))
    return rows
