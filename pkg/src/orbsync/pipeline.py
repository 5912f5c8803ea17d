"""End-to-end synthesis from a JSON configuration, and artifact persistence.

Configuration layout (``schema_version`` 1)::

    {
      "schema_version": 1,
      "synthesis": {
        "plant": {"id": "rotor", "params": {"omega": 3.14159..., "gravity_coeff": 1.0}},
        "reference": {"kind": "analytic"}
                   | {"kind": "limit_cycle", "initial_guess": [2, 0],
                      "section": {"normal": [0, 1], "offset": 0, "direction": -1},
                      "tol": 1e-10, "phase_index": null},
        "chart": {"strategy": "monotone" | "orthogonal", "tube_radius": null},
        "grid_N": 2048,
        "lqr": {"Q": [[1]], "R": [[1]]},
        "augmented_lqr": {"Q": [[1, 0], [0, 1]], "R": [[1]]},     (optional)
        "sliding": {"k": 0.05, "b_min_threshold": 1e-4},            (optional)
        "tolerances": {"periodic_tol": 1e-8, "max_periods": 60,
                       "gramian_threshold": 1e-8, "max_multiplier": 0.99,
                       "adjoint_residual": 1e-6}
      },
      "scenario": { ... see orbsync.sim.ScenarioConfig ... }
    }

Weight matrices may be given as nested lists, as a flat list (diagonal) or
as a scalar.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .artifacts import (SCHEMA_VERSION, config_hash, file_hash, read_json, read_table, write_json,
                        write_table)
from .errors import ConfigError, OrbSyncError
from .numerics import PeriodicGrid
from .plant import (Section, analytic_reference, find_limit_cycle, load_orbit, make_plant, save_orbit,
                    verify_reference)
from .sim import AgentSpec, ScenarioConfig
from .synthesis import (DEFAULT_B_MIN_THRESHOLD, AugmentedGains, GainSchedule, SlidingSurface,
                        adjoint_periodic, adjoint_residual, augmented_lqr, b_lower_bound,
                        closed_loop, controllability_gramian, floquet_multipliers, periodic_lqr,
                        sliding_b)
from .transverse import LinearizedExtended, TransverseChart, linearize_extended

DEFAULT_TOLERANCES = {"periodic_tol": 1e-8, "max_periods": 60, "gramian_threshold": 1e-8,
                      "max_multiplier": 0.99, "adjoint_residual": 1e-6}


def weight_matrix(spec, d: int, name: str) -> np.ndarray:
    a = np.asarray(spec, dtype=float)
    if a.ndim == 0:
        a = a * np.eye(d)
    elif a.ndim == 1:
        a = np.diag(a)
    if a.shape != (d, d):
        raise ConfigError(f"{name} must be {d}x{d}, got shape {a.shape}")
    return a


def _section(spec) -> Section:
    try:
        return Section(tuple(float(v) for v in spec["normal"]), float(spec.get("offset", 0.0)),
                       int(spec.get("direction", -1)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad section specification: {exc}") from None


def load_config(path) -> dict:
    try:
        cfg = read_json(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.get('schema_version')!r}")
    if "synthesis" not in cfg:
        raise ConfigError("config lacks a 'synthesis' section")
    return cfg


def tolerances(syn_cfg: dict) -> dict:
    tol = dict(DEFAULT_TOLERANCES)
    extra = syn_cfg.get("tolerances", {}) or {}
    unknown = set(extra) - set(tol)
    if unknown:
        raise ConfigError(f"unknown tolerance keys {sorted(unknown)}")
    tol.update(extra)
    return tol


def build_plant(syn_cfg: dict):
    try:
        p = syn_cfg["plant"]
        return make_plant(p["id"], p.get("params", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad plant specification: {exc}") from None


def build_reference(plant, syn_cfg: dict, N: int):
    ref = syn_cfg.get("reference", {"kind": "analytic"})
    kind = ref.get("kind")
    if kind == "analytic":
        try:
            return analytic_reference(plant, N=N)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if kind == "limit_cycle":
        if "initial_guess" not in ref or "section" not in ref:
            raise ConfigError("limit_cycle reference needs initial_guess and section")
        return find_limit_cycle(plant, ref["initial_guess"], _section(ref["section"]),
                                tol=float(ref.get("tol", 1e-10)), N=N,
                                phase_index=ref.get("phase_index"))
    raise ConfigError(f"unknown reference kind {kind!r}")


@dataclass
class Synthesis:
    """Everything a simulation needs, plus the validation report."""

    config: dict
    plant: object
    orbit: object
    chart: TransverseChart
    lin: LinearizedExtended
    gains: Optional[GainSchedule]
    augmented: Optional[AugmentedGains] = None
    n_vec: Optional[PeriodicGrid] = None
    surface: Optional[SlidingSurface] = None
    report: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.report.get("checks", {}).values())


def _check(report, name, value, threshold, passed, note=None):
    entry = {"value": value, "threshold": threshold, "passed": bool(passed)}
    if note:
        entry["note"] = note
    report["checks"][name] = entry


def _multipliers_json(mult):
    return [[float(np.real(z)), float(np.imag(z))] for z in mult]


def synthesize(syn_cfg: dict) -> Synthesis:
    """Orbit, chart, linearization, gains, adjoint and sliding surface with checks.

    Configuration problems raise :class:`ConfigError`.  Failed validation
    checks are recorded in ``report`` instead of raising, so a report can
    always be written.
    """
    tol = tolerances(syn_cfg)
    N = int(syn_cfg.get("grid_N", 2048))
    plant = build_plant(syn_cfg)
    chart_cfg = syn_cfg.get("chart", {}) or {}
    report = {"checks": {}, "errors": []}
    orbit = build_reference(plant, syn_cfg, N)
    ref = verify_reference(plant, orbit)
    _check(report, "reference_residual", ref.max_residual, 1e-6, ref.max_residual <= 1e-6)
    _check(report, "reference_theta_rate", ref.min_theta_rate, 0.0, ref.min_theta_rate > 0)
    _check(report, "reference_speed", ref.min_speed, 0.0, ref.min_speed > 0)
    report["period"] = orbit.T
    try:
        chart = TransverseChart(orbit, chart_cfg.get("strategy", "monotone"), chart_cfg.get("tube_radius"))
    except ValueError as exc:
        raise ConfigError(f"bad chart specification: {exc}") from None
    report["tube_radius"] = chart.tube_radius
    lin = linearize_extended(plant, orbit, chart, N)
    k = chart.n - 1
    m = plant.m
    syn = Synthesis(syn_cfg, plant, orbit, chart, lin, None, report=report)

    W, wmin = controllability_gramian(lin.A_xi, lin.B_xi)
    report["gramian_eigenvalues"] = np.linalg.eigvalsh(W).tolist()
    _check(report, "gramian", wmin, tol["gramian_threshold"], wmin > tol["gramian_threshold"])

    lqr_cfg = syn_cfg.get("lqr", {"Q": 1.0, "R": 1.0})
    Q = weight_matrix(lqr_cfg.get("Q", 1.0), k, "lqr.Q")
    R = weight_matrix(lqr_cfg.get("R", 1.0), m, "lqr.R")
    report["weights"] = {"Q": Q.tolist(), "R": R.tolist()}
    try:
        syn.gains = periodic_lqr(lin.A_xi, lin.B_xi, Q, R, tol["periodic_tol"], tol["max_periods"],
                                 check_stability=False)
    except OrbSyncError as exc:
        report["errors"].append(f"lqr: {exc}")
        _check(report, "riccati", None, tol["periodic_tol"], False, str(exc))
        return syn
    g = syn.gains
    _check(report, "riccati", g.riccati_gap, tol["periodic_tol"], g.riccati_gap <= tol["periodic_tol"])
    report["floquet_multipliers"] = _multipliers_json(g.closed_loop_multipliers)
    _check(report, "floquet", g.max_multiplier, tol["max_multiplier"], g.max_multiplier <= tol["max_multiplier"])

    aug_cfg = syn_cfg.get("augmented_lqr")
    if aug_cfg is not None:
        Qa = weight_matrix(aug_cfg.get("Q", 1.0), k + 1, "augmented_lqr.Q")
        Ra = weight_matrix(aug_cfg.get("R", 1.0), m, "augmented_lqr.R")
        report["augmented_weights"] = {"Q": Qa.tolist(), "R": Ra.tolist()}
        Wa, wamin = controllability_gramian(*lin.augmented())
        _check(report, "augmented_gramian", wamin, tol["gramian_threshold"], wamin > tol["gramian_threshold"])
        try:
            syn.augmented = augmented_lqr(lin, Qa, Ra, tol["periodic_tol"], tol["max_periods"],
                                          check_stability=False)
            am = syn.augmented.schedule.max_multiplier
            report["augmented_multipliers"] = _multipliers_json(syn.augmented.schedule.closed_loop_multipliers)
            _check(report, "augmented_floquet", am, tol["max_multiplier"], am <= tol["max_multiplier"])
        except OrbSyncError as exc:
            report["errors"].append(f"augmented_lqr: {exc}")
            _check(report, "augmented_riccati", None, tol["periodic_tol"], False, str(exc))

    sl_cfg = syn_cfg.get("sliding")
    if sl_cfg is not None:
        if m != 1:
            raise ConfigError("sliding synthesis requires a single-input plant")
        kk = float(sl_cfg.get("k", 0.05))
        thr = float(sl_cfg.get("b_min_threshold", DEFAULT_B_MIN_THRESHOLD))
        if kk < 0:
            raise ConfigError("sliding.k must be non-negative")
        if g.max_multiplier >= 1.0:
            report["errors"].append("adjoint skipped: orbital gain is not stabilizing")
            _check(report, "adjoint", None, tol["periodic_tol"], False, "gain not stabilizing")
            return syn
        try:
            syn.n_vec = adjoint_periodic(lin, g, tol["periodic_tol"], tol["max_periods"])
        except OrbSyncError as exc:
            report["errors"].append(f"adjoint: {exc}")
            _check(report, "adjoint", None, tol["periodic_tol"], False, str(exc))
            return syn
        res = adjoint_residual(lin, g, syn.n_vec)
        _check(report, "adjoint_residual", res, tol["adjoint_residual"], res <= tol["adjoint_residual"])
        b = sliding_b(lin, syn.n_vec)[:, 0]
        b_min = b_lower_bound(b)
        report["b_min"] = b_min
        report["sync_bound"] = kk / b_min if b_min > 0 else None
        _check(report, "b_min", b_min, thr, b_min >= thr)
        if b_min > 0:
            syn.surface = SlidingSurface(syn.n_vec, PeriodicGrid(lin.T_theta, b).with_fd_slopes(), b_min, kk)
    return syn


# --- persistence ---------------------------------------------------------------


def _grid_columns(syn: Synthesis):
    th = syn.lin.A_xi.nodes()
    names, cols = ["theta"], [th]

    def add(label, grid):
        flat = grid.samples.reshape(grid.N, -1)
        shape = grid.shape
        if len(shape) == 2:
            names.extend(f"{label}_{i}{j}" for i in range(shape[0]) for j in range(shape[1]))
        else:
            names.extend(f"{label}_{i}" for i in range(flat.shape[1]))
        cols.append(flat)

    if syn.gains is not None:
        add("K", syn.gains.K)
    if syn.n_vec is not None:
        add("n", syn.n_vec)
        add("b", PeriodicGrid(syn.lin.T_theta, sliding_b(syn.lin, syn.n_vec)))
    if syn.augmented is not None:
        add("K_xi", syn.augmented.K_xi)
        add("K_h", syn.augmented.K_h)
    return names, np.column_stack(cols)


def save_synthesis(syn: Synthesis, out_dir) -> dict:
    """Write ``synthesis.json``, ``report.json`` and CSV tables; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_orbit(syn.orbit, out / "orbit.csv")
    names, data = syn.lin.columns()
    write_table(out / "linearization.csv", names, data)
    gnames, gdata = _grid_columns(syn)
    write_table(out / "grids.csv", gnames, gdata)
    write_json(out / "report.json", syn.report)
    files = {name: file_hash(out / name) for name in ("orbit.csv", "linearization.csv", "grids.csv", "report.json")}
    doc = {
        "schema_version": SCHEMA_VERSION,
        "toolkit_version": __version__,
        "config": syn.config,
        "config_hash": config_hash(syn.config),
        "plant": syn.plant.name,
        "T": syn.orbit.T,
        "T_theta": syn.orbit.T_theta,
        "grid_N": syn.lin.N,
        "dims": {"n": syn.plant.n, "m": syn.plant.m, "k": syn.chart.n - 1},
        "chart": {"strategy": syn.chart.strategy, "tube_radius": syn.chart.tube_radius},
        "k": None if syn.surface is None else syn.surface.k,
        "b_min": syn.report.get("b_min"),
        "b_min_threshold": (syn.config.get("sliding") or {}).get("b_min_threshold", DEFAULT_B_MIN_THRESHOLD),
        "floquet_multipliers": syn.report.get("floquet_multipliers"),
        "gramian_eigenvalues": syn.report.get("gramian_eigenvalues"),
        "riccati": None if syn.gains is None else {"gap": syn.gains.riccati_gap, "periods": syn.gains.periods},
        "passed": syn.passed,
        "files": files,
    }
    write_json(out / "synthesis.json", doc)
    return files


def read_synthesis_doc(syn_dir) -> dict:
    path = Path(syn_dir) / "synthesis.json"
    try:
        doc = read_json(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path} has an unsupported schema")
    for key in ("config", "config_hash", "T_theta", "dims", "chart"):
        if key not in doc:
            raise ConfigError(f"{path} lacks field {key!r}")
    return doc


def read_grids(syn_dir, doc):
    """Stored ``K, n, b, K_xi, K_h`` grids (any may be ``None``) and the linearization."""
    syn_dir = Path(syn_dir)
    dims = doc["dims"]
    k, m = dims["k"], dims["m"]
    T = doc["T_theta"]
    try:
        lnames, ldata = read_table(syn_dir / "linearization.csv")
        lin = LinearizedExtended.from_columns(lnames, ldata, T, k, m)
        gnames, gdata = read_table(syn_dir / "grids.csv")
    except (OSError, ValueError, IndexError) as exc:
        raise ConfigError(f"cannot read synthesis tables: {exc}") from None
    N = gdata.shape[0]

    def take(label, shape):
        cols = [i for i, c in enumerate(gnames) if c.rsplit("_", 1)[0] == label]
        if not cols:
            return None
        return PeriodicGrid(T, gdata[:, cols].reshape((N,) + shape)).with_fd_slopes()

    return lin, {"K": take("K", (m, k)), "n": take("n", (k,)), "b": take("b", (m,)),
                 "K_xi": take("K_xi", (m, k)), "K_h": take("K_h", (m, 1))}


def load_synthesis(syn_dir) -> Synthesis:
    """Rebuild a :class:`Synthesis` from a directory written by :func:`save_synthesis`."""
    doc = read_synthesis_doc(syn_dir)
    cfg = doc["config"]
    plant = build_plant(cfg)
    try:
        orbit = load_orbit(Path(syn_dir) / "orbit.csv", plant)
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise ConfigError(f"cannot read orbit table: {exc}") from None
    chart = TransverseChart(orbit, doc["chart"]["strategy"], doc["chart"]["tube_radius"])
    lin, grids = read_grids(syn_dir, doc)
    gains = None
    if grids["K"] is not None:
        mult = np.array([complex(a, b) for a, b in (doc.get("floquet_multipliers") or [])])
        gap = (doc.get("riccati") or {}).get("gap", float("nan"))
        periods = (doc.get("riccati") or {}).get("periods", 0)
        gains = GainSchedule(grids["K"], None, mult, gap, periods)
    aug = None
    if grids["K_xi"] is not None and grids["K_h"] is not None:
        aug = AugmentedGains(grids["K_xi"], grids["K_h"], None)
    surface = None
    if grids["n"] is not None and doc.get("b_min"):
        b = PeriodicGrid(doc["T_theta"], grids["b"].samples[:, 0]).with_fd_slopes()
        surface = SlidingSurface(grids["n"], b, float(doc["b_min"]), float(doc["k"]))
    report = read_json(Path(syn_dir) / "report.json") if (Path(syn_dir) / "report.json").exists() else {}
    return Synthesis(cfg, plant, orbit, chart, lin, gains, aug, grids["n"], surface, report)


def check_synthesis(syn_dir, drift_tol: float = 1e-4):
    """Recompute validation checks from stored grids.

    Returns ``(checks, warnings)``.  When the stored grids are coarser than
    the recorded grid size (downsampled), the adjoint residual is replaced
    by a drift check: ``K``, ``n`` and ``b`` recomputed on the stored grid
    must agree with the stored values within ``drift_tol``.
    """
    doc = read_synthesis_doc(syn_dir)
    tol = tolerances(doc["config"])
    lin, grids = read_grids(syn_dir, doc)
    checks, warnings = {}, []
    K = grids["K"]
    if K is None:
        return {"gains_present": {"value": None, "threshold": None, "passed": False}}, warnings
    if K.N != lin.N:
        if lin.N % K.N:
            raise ConfigError("grids.csv and linearization.csv have incompatible grid sizes")
        stride = lin.N // K.N
        lin = LinearizedExtended(*(PeriodicGrid(lin.T_theta, g.samples[::stride]).with_fd_slopes()
                                   for g in (lin.A_xi, lin.B_xi, lin.A_h, lin.B_h)), lin.T_theta)
    mult = floquet_multipliers(closed_loop(lin.A_xi, lin.B_xi, K))
    mmax = float(np.max(np.abs(mult)))
    checks["floquet"] = {"value": mmax, "threshold": tol["max_multiplier"], "passed": mmax <= tol["max_multiplier"]}
    downsampled = K.N != int(doc.get("grid_N", K.N))
    if downsampled:
        warnings.append(f"grids hold {K.N} samples but synthesis used {doc.get('grid_N')}; "
                        "checking drift instead of the adjoint residual")
        lqr_cfg = doc["config"].get("lqr", {"Q": 1.0, "R": 1.0})
        k, m = doc["dims"]["k"], doc["dims"]["m"]
        try:
            g2 = periodic_lqr(lin.A_xi, lin.B_xi, weight_matrix(lqr_cfg.get("Q", 1.0), k, "Q"),
                              weight_matrix(lqr_cfg.get("R", 1.0), m, "R"), tol["periodic_tol"],
                              tol["max_periods"], check_stability=False)
            drift = float(np.max(np.abs(g2.K.samples - K.samples)))
            if grids["n"] is not None:
                n2 = adjoint_periodic(lin, g2, tol["periodic_tol"], tol["max_periods"])
                drift = max(drift, float(np.max(np.abs(n2.samples - grids["n"].samples))))
                b2 = sliding_b(lin, n2)
                drift = max(drift, float(np.max(np.abs(b2 - grids["b"].samples))))
        except OrbSyncError as exc:
            warnings.append(f"recomputation failed: {exc}")
            drift = float("inf")
        checks["grid_drift"] = {"value": drift, "threshold": drift_tol, "passed": drift <= drift_tol}
        if drift <= drift_tol:
            warnings.append(f"grid drift {drift:.3g} within {drift_tol:g}")
    if grids["n"] is not None:
        if not downsampled:
            res = adjoint_residual(lin, K, grids["n"])
            checks["adjoint_residual"] = {"value": res, "threshold": tol["adjoint_residual"],
                                          "passed": res <= tol["adjoint_residual"]}
        thr = float(doc.get("b_min_threshold", DEFAULT_B_MIN_THRESHOLD))
        b_min = b_lower_bound(sliding_b(lin, grids["n"])[:, 0])
        checks["b_min"] = {"value": b_min, "threshold": thr, "passed": b_min >= thr}
    return checks, warnings


def scenario_from_config(sc: dict) -> ScenarioConfig:
    """Parse the ``scenario`` section; every field except the optional ones is required."""
    required = ("mode", "agents", "duration", "dt")
    missing = [k for k in required if k not in sc]
    if missing:
        raise ConfigError(f"scenario lacks {missing}")
    known = {"mode", "agents", "duration", "dt", "topology", "k", "h_max", "publish_rate", "comm_delay",
             "schedule", "rng_seed", "jitter", "boundary_layer", "zero_order_hold"}
    unknown = set(sc) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
    try:
        agents = [AgentSpec(int(a["id"]), float(a.get("theta0", 0.0)), a.get("xi0"), a.get("x0"),
                            float(a.get("h0", 0.0))) for a in sc["agents"]]
        schedule = [(float(t), int(i), str(act)) for t, i, act in sc.get("schedule", [])]
        cfg = ScenarioConfig(
            mode=sc["mode"], agents=agents, duration=float(sc["duration"]), dt=float(sc["dt"]),
            topology=sc.get("topology", "centralized"), k=sc.get("k"), h_max=sc.get("h_max"),
            publish_rate=float(sc.get("publish_rate", 60.0)), comm_delay=float(sc.get("comm_delay", 0.0)),
            schedule=schedule, rng_seed=int(sc.get("rng_seed", 0)), jitter=float(sc.get("jitter", 0.0)),
            boundary_layer=float(sc.get("boundary_layer", 0.0)),
            zero_order_hold=bool(sc.get("zero_order_hold", False)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario: {exc}") from None
    cfg.validate()
    return cfg
