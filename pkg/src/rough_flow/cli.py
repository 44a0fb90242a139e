"""Batch experiment runner.

``rough-flow run <config.json>`` builds the requested geometry, runs one named
experiment and writes a manifest plus CSV tables into the output directory.
The exit code is 0 exactly when every hard-gated check passes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .continuity import DEFAULT_RTOL
from .errors import MeshParseError, MeshTopologyError, RoughFlowError
from .flow import (DEFAULT_T_LADDER, build_evolved_metric, equivariance_defect,
                   evolved_distance_matrix, frame_rotation, metric_at, sample_metric,
                   smoothness_diagnostic, tangency_slope)
from .heat import build_heat_kernel
from .mesh import (build_box_surface, build_icosphere, build_polar_grid, cube_symmetries,
                   load_mesh, vertex_permutation, z_rotation)
from .metric import pullback_embedding, witch_hat_metric

log = logging.getLogger("rough_flow")

EXPERIMENTS = ("sphere-tangency", "witch-hat", "box", "heat-check", "speed-check")

DEFAULT_MESH = {
    "sphere-tangency": {"kind": "icosphere", "subdivisions": 4, "radius": 1.0},
    "witch-hat": {"kind": "polar", "n_lat": 16, "n_lon": 32},
    "box": {"kind": "box", "per_edge": 6},
    "heat-check": {"kind": "icosphere", "subdivisions": 3, "radius": 1.0},
    "speed-check": {"kind": "icosphere", "subdivisions": 2, "radius": 1.0},
}

DEFAULT_TIMES = {
    "sphere-tangency": list(DEFAULT_T_LADDER),
    "witch-hat": [0.5],
    "box": [0.5],
    "heat-check": ["t_min", 0.1, 0.5, 1.0],
    "speed-check": [0.5, 1.0],
}

DEFAULT_SAMPLES = {"sphere-tangency": [0]}

DEFAULT_TOLERANCES = {
    "cg_rtol": DEFAULT_RTOL,
    "slope_rel": 0.10,
    "symmetry": 1e-9,
    "evaluation_gap": 1e-8,
    "mass": 1e-10,
    "semigroup": 1e-10,
    "speed_rel": 0.15,
    "equivariance": 1e-6,
    "smoothness": 1.0,
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration.

    ``samples`` is ``"all"`` (every non-singular vertex), an integer count of
    seeded random non-singular vertices, or an explicit vertex list. ``K``
    and ``N`` are carried as metadata only.
    """

    experiment: str
    mesh: dict
    t: list
    samples: object = "all"
    tolerances: dict = field(default_factory=dict)
    seed: int = 0
    steps: int = 6
    triples: int = 100
    out: str = "rough_flow_out"
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        name = raw.get("experiment")
        if name not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}; got {name!r}")
        known = {"experiment", "mesh", "t", "samples", "tolerances", "seed", "steps",
                 "triples", "out", "metadata", "K", "N"}
        extra = sorted(set(raw) - known)
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(extra)}")
        mesh = dict(DEFAULT_MESH[name])
        mesh.update(raw.get("mesh", {}))
        tol = dict(DEFAULT_TOLERANCES)
        tol.update(raw.get("tolerances", {}))
        for k, v in tol.items():
            if not isinstance(v, (int, float)) or not v > 0:
                raise ConfigError(f"tolerance {k!r} must be > 0, got {v!r}")
        times = raw.get("t", DEFAULT_TIMES[name])
        if not isinstance(times, list) or not times:
            raise ConfigError("t must be a non-empty list")
        for t in times:
            if t != "t_min" and (not isinstance(t, (int, float)) or t < 0):
                raise ConfigError(f"t values must be >= 0 or \"t_min\", got {t!r}")
        meta = dict(raw.get("metadata", {}))
        for key in ("K", "N"):
            if key in raw:
                meta[key] = raw[key]
        if "N" in meta and not (isinstance(meta["N"], (int, float)) and meta["N"] > 0):
            raise ConfigError("metadata N must be a positive number")
        samples = raw.get("samples", DEFAULT_SAMPLES.get(name, "all"))
        if not (samples == "all" or (isinstance(samples, int) and samples > 0)
                or (isinstance(samples, list) and all(isinstance(s, int) for s in samples))):
            raise ConfigError("samples must be \"all\", a positive count or a vertex list")
        return cls(experiment=name, mesh=mesh, t=list(times), samples=samples,
                   tolerances=tol, seed=int(raw.get("seed", 0)),
                   steps=int(raw.get("steps", 6)), triples=int(raw.get("triples", 100)),
                   out=str(raw.get("out", "rough_flow_out")), metadata=meta)

    def canonical(self):
        d = asdict(self)
        d.pop("out")
        return d

    @property
    def hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno} "
                          f"(char {exc.pos}): {exc.msg}") from None
    return ExperimentConfig.from_dict(raw)


# ---------------------------------------------------------------------------
# geometry

def build_geometry(spec):
    kind = spec.get("kind")
    if kind == "icosphere":
        mesh = build_icosphere(int(spec["subdivisions"]), float(spec.get("radius", 1.0)))
        return mesh, pullback_embedding(mesh)
    if kind == "box":
        mesh = build_box_surface(int(spec["per_edge"]))
        return mesh, pullback_embedding(mesh)
    if kind == "polar":
        mesh = build_polar_grid(int(spec["n_lat"]), int(spec["n_lon"]))
        return mesh, witch_hat_metric(mesh)
    if kind == "file":
        from .metric import load_metric

        mesh = load_mesh(spec["path"])
        g = load_metric(spec["metric"], mesh) if "metric" in spec else pullback_embedding(mesh)
        return mesh, g
    raise ConfigError(f"unknown mesh kind {kind!r}")


@dataclass
class Check:
    name: str
    measured: float
    required: float
    relation: str
    hard: bool = True

    @property
    def passed(self):
        m = self.measured
        if isinstance(m, float) and math.isnan(m):
            return False
        return {"<=": m <= self.required, ">": m > self.required,
                "==": m == self.required, ">=": m >= self.required}[self.relation]

    def as_dict(self):
        return {"name": self.name, "measured": self.measured, "required": self.required,
                "relation": self.relation, "hard": self.hard, "passed": bool(self.passed)}


class Run:
    """Per-run context: output directory, header, RNG, checks, timings."""

    def __init__(self, cfg, out, threads):
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = threads
        self.rng = np.random.default_rng(cfg.seed)
        self.checks = []
        self.timings = {}
        self.outputs = []
        self.notes = []
        self.header = f"config_hash={cfg.hash} experiment={cfg.experiment}"

    def check(self, name, measured, required, relation="<=", hard=True):
        c = Check(name, float(measured), float(required), relation, hard)
        self.checks.append(c)
        log.info("%s %s: %.6g %s %.6g", "PASS" if c.passed else "FAIL", name, c.measured,
                 relation, c.required)
        return c

    def timed(self, label, fn, *args, **kw):
        t0 = time.perf_counter()
        result = fn(*args, **kw)
        self.timings[label] = self.timings.get(label, 0.0) + time.perf_counter() - t0
        return result

    def csv(self, name, columns, rows):
        path = self.out / name
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# {self.header}\n")
            fh.write(",".join(columns) + "\n")
            for r in rows:
                fh.write(",".join(_fmt(v) for v in r) + "\n")
        self.outputs.append(name)
        return path

    def note(self, text):
        log.warning(text)
        self.notes.append(text)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def resolve_times(run, kernel):
    """Numeric times, with entries below the positivity threshold dropped."""
    t_min = getattr(kernel, "t_min", None)
    out = []
    for t in run.cfg.t:
        if t == "t_min":
            if t_min is None:
                run.note("t_min requested but the kernel backend has no spectrum; skipped")
                continue
            out.append(float(t_min))
            continue
        t = float(t)
        if t_min is not None and t < t_min:
            run.note(f"t={t:g} is below t_min={t_min:.4g} for this mesh; dropped")
            continue
        if t <= 0:
            run.note(f"t={t:g} is not positive; dropped")
            continue
        out.append(t)
    return out


def choose_samples(run, mesh):
    regular = [int(v) for v in mesh.regular_vertices()]
    s = run.cfg.samples
    if s == "all":
        return regular
    if isinstance(s, int):
        k = min(s, len(regular))
        return sorted(int(v) for v in run.rng.choice(regular, size=k, replace=False))
    bad = [v for v in s if v in mesh.singular or not 0 <= v < mesh.n_vertices]
    if bad:
        raise ConfigError(f"sample vertices are singular or out of range: {bad}")
    return [int(v) for v in s]


def regular_region(mesh, verts, label):
    """Vertices where the metric is smooth: off the cube edges, or the witch's-hat annulus."""
    if label == "witch-hat":
        r = np.arccos(np.clip(mesh.vertices[:, 2], -1.0, 1.0))
        return [v for v in verts if math.pi / 3 - 1e-12 <= r[v] <= 2 * math.pi / 3 + 1e-12]
    return [v for v in verts if v not in mesh.edge_line]


def flow_checks(run, kernel, samples, label):
    tol = run.cfg.tolerances
    asym = max(s.asymmetry / max(abs(s.G).max(), 1e-300) for s in samples.values())
    gap = max(s.evaluation_gap for s in samples.values())
    min_eig = min(float(s.eigenvalues.min()) for s in samples.values())
    run.check(f"{label}: G symmetry", asym, tol["symmetry"])
    run.check(f"{label}: evaluation agreement", gap, tol["evaluation_gap"])
    run.check(f"{label}: smallest eigenvalue positive", min_eig, 0.0, ">")
    cov = 0.0
    rot = 0.7
    for x in list(samples)[: min(10, len(samples))]:
        r = metric_at(kernel, samples[x].t, x, frame_angle=rot, rtol=tol["cg_rtol"])
        R = frame_rotation(rot)
        cov = max(cov, float(np.abs(R.T @ samples[x].G @ R - r.G).max()
                             / np.abs(samples[x].G).max()))
    run.check(f"{label}: frame covariance", cov, tol["symmetry"])
    return asym, gap, min_eig


def flow_rows(samples):
    for x in sorted(samples):
        s = samples[x]
        e1, e2 = s.eigenvalues
        yield (x, s.t, s.G[0, 0], s.G[0, 1], s.G[1, 1], e1, e2, s.residuals[0], s.residuals[1])


FLOW_COLUMNS = ("vertex", "t", "G11", "G12", "G22", "eig1", "eig2", "residual1", "residual2")


# ---------------------------------------------------------------------------
# experiments

def exp_sphere_tangency(run, mesh, g):
    kernel = run.timed("heat_kernel", build_heat_kernel, mesh, g)
    times = sorted(resolve_times(run, kernel), reverse=True)
    radius = float(run.cfg.mesh.get("radius", 1.0))
    if len(times) < 2:
        run.check("usable t values for extrapolation", len(times), 2, ">=")
        return
    xs = choose_samples(run, mesh)
    target = -2.0 / radius ** 2
    rows = []
    worst = 0.0
    for x in xs:
        for a, v in enumerate((np.array([1.0, 0.0]), np.array([0.0, 1.0]))):
            res = run.timed("tangency", tangency_slope, kernel, x, v, times,
                            rtol=run.cfg.tolerances["cg_rtol"])
            rel = abs(res.slope - target) / abs(target)
            worst = max(worst, rel)
            for t, q, val in zip(res.times, res.difference_quotients, res.values):
                rows.append((x, a, t, val, q, res.slope))
    run.csv("tangency.csv", ("vertex", "direction", "t", "g_t_vv", "difference_quotient",
                             "extrapolated_slope"), rows)
    run.check(f"tangency slope within {run.cfg.tolerances['slope_rel']:g} of {target:g}",
              worst, run.cfg.tolerances["slope_rel"])


def _singular_experiment(run, mesh, g, label):
    tol = run.cfg.tolerances
    kernel = run.timed("heat_kernel", build_heat_kernel, mesh, g)
    times = resolve_times(run, kernel)
    if not times:
        run.check("usable t values", 0, 1, ">=")
        return
    verts = choose_samples(run, mesh)
    for t in times:
        tag = f"{label} t={t:g}"
        samples = run.timed("flow", sample_metric, kernel, t, verts, rtol=tol["cg_rtol"],
                            threads=run.threads)
        run.csv(f"flow_t{t:g}.csv", FLOW_COLUMNS, flow_rows(samples))
        flow_checks(run, kernel, samples, tag)
        full = run.cfg.samples == "all"
        if not full:
            continue
        em = run.timed("distances", build_evolved_metric, kernel, t, samples=samples)
        sm = smoothness_diagnostic(em, regular_region(mesh, verts, label))
        run.check(f"{tag}: smoothness on regular region", sm.max_variation, tol["smoothness"])
        pick = sorted(int(v) for v in run.rng.choice(verts, size=min(len(verts), 60),
                                                      replace=False))
        D = evolved_distance_matrix(em, pick)
        index = {v: i for i, v in enumerate(pick)}
        run.csv(f"distances_t{t:g}.csv", ("vertex",) + tuple(map(str, pick)),
                ((v,) + tuple(D[index[v]]) for v in pick))
        finite = bool(np.all(np.isfinite(D)))
        asym = float(np.abs(D - D.T).max())
        worst = 0.0
        for _ in range(run.cfg.triples):
            i, j, k = run.rng.choice(len(pick), size=3, replace=False)
            worst = max(worst, D[i, k] - D[i, j] - D[j, k])
        run.check(f"{tag}: distances finite", float(finite), 1.0, "==")
        run.check(f"{tag}: distance symmetry", asym, 1e-12)
        run.check(f"{tag}: triangle inequality excess", worst, 1e-12)
        if label == "witch-hat":
            n_lon = int(run.cfg.mesh["n_lon"])
            perms = [vertex_permutation(mesh, z_rotation(2 * math.pi * k / n_lon))
                     for k in (1, 2, n_lon // 2)]
            run.check(f"{tag}: polar rotations are mesh symmetries",
                      float(all(p is not None for p in perms)), 1.0, "==")
            worst = max(equivariance_defect(kernel, samples, p) for p in perms if p is not None)
            run.check(f"{tag}: polar rotation invariance", worst, tol["equivariance"])
        if label == "box":
            group = [vertex_permutation(mesh, R) for R in cube_symmetries()]
            group = [p for p in group if p is not None]
            away = [v for v in verts if v not in mesh.edge_line]
            run.check(f"{tag}: symmetry group order", len(group), 48, "==")
            worst = max(equivariance_defect(kernel, samples, p, away) for p in group)
            run.check(f"{tag}: 48-symmetry invariance away from edges", worst,
                      tol["equivariance"])


def exp_witch_hat(run, mesh, g):
    _singular_experiment(run, mesh, g, "witch-hat")


def exp_box(run, mesh, g):
    _singular_experiment(run, mesh, g, "box")


def exp_heat_check(run, mesh, g):
    tol = run.cfg.tolerances
    kernel = run.timed("heat_kernel", build_heat_kernel, mesh, g, dense=True)
    times = resolve_times(run, kernel)
    rows = []
    for t in times:
        tag = f"t={t:.6g}"
        K = kernel.kernel_matrix(t)
        mass = kernel.mass_defect(t)
        sym = float(np.abs(K - K.T).max())
        semi = kernel.semigroup_residual(t)
        kmin, kmax = kernel.kernel_positivity_bounds(t)
        rows.append((t, mass, sym, semi, kmin, kmax))
        run.check(f"{tag}: mass conservation", mass, tol["mass"])
        run.check(f"{tag}: symmetry", sym, 0.0, "==")
        run.check(f"{tag}: semigroup", semi, tol["semigroup"])
        run.check(f"{tag}: positivity", kmin, 0.0, ">")
    run.csv("heat_check.csv", ("t", "mass_defect", "asymmetry", "semigroup_residual",
                               "kernel_min", "kernel_max"), rows)
    kernel.export_eigenpairs(run.out)
    # header the eigenvalue table like every other output
    p = run.out / "eigen_values.csv"
    p.write_text(f"# {run.header}\n" + p.read_text(encoding="utf-8"), encoding="utf-8")
    run.outputs += ["eigen_values.csv", "eigen_vectors.npy"]


def exp_speed_check(run, mesh, g):
    from .transport import equatorial_path, metric_speed_check

    tol = run.cfg.tolerances
    kernel = run.timed("heat_kernel", build_heat_kernel, mesh, g)
    times = resolve_times(run, kernel)
    path = equatorial_path(mesh, run.cfg.steps)
    rows = []
    for t in times:
        rep = run.timed("speed", metric_speed_check, kernel, t, path, rtol=tol["cg_rtol"])
        for s in rep.steps:
            rows.append((t, s.source, s.target, s.h, s.w2, s.speed_w, s.speed_g, s.mismatch))
        run.check(f"t={t:g}: per-step W2 speed mismatch", rep.max_mismatch, tol["speed_rel"])
        run.check(f"t={t:g}: aggregate W2 speed mismatch", rep.aggregate_mismatch,
                  tol["speed_rel"], hard=False)
    run.csv("speed.csv", ("t", "source", "target", "h", "w2", "speed_w2", "speed_g",
                          "mismatch"), rows)


RUNNERS = {
    "sphere-tangency": exp_sphere_tangency,
    "witch-hat": exp_witch_hat,
    "box": exp_box,
    "heat-check": exp_heat_check,
    "speed-check": exp_speed_check,
}


def _versions():
    import scipy

    out = {"rough_flow": __version__, "python": platform.python_version(),
           "numpy": np.__version__, "scipy": scipy.__version__}
    try:
        from importlib.metadata import version

        out["pot"] = version("pot")
    except Exception:  # pragma: no cover
        pass
    return out


def run_config(cfg, out=None, threads=1):
    """Run one experiment; returns ``(exit_code, run)``."""
    run = Run(cfg, out or cfg.out, threads)
    t0 = time.perf_counter()
    mesh, g = run.timed("geometry", build_geometry, cfg.mesh)
    try:
        RUNNERS[cfg.experiment](run, mesh, g)
    except RoughFlowError as exc:
        run.note(f"experiment aborted: {exc}")
        run.checks.append(Check("experiment completed", 0.0, 1.0, "==", True))
    run.timings["total"] = time.perf_counter() - t0
    ok = all(c.passed for c in run.checks if c.hard) and bool(run.checks)
    manifest = {
        "config_hash": cfg.hash,
        "config": cfg.canonical(),
        "mesh": {"vertices": mesh.n_vertices, "faces": mesh.n_faces,
                 "singular": sorted(mesh.singular)},
        "versions": _versions(),
        "checks": [c.as_dict() for c in run.checks],
        "notes": run.notes,
        "outputs": sorted(run.outputs),
        "passed": ok,
        "timings": {k: round(v, 3) for k, v in sorted(run.timings.items())},
    }
    with open(run.out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=False)
        fh.write("\n")
    return (0 if ok else 1), run


def cmd_run(args):
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = int(args.seed)
    threads = args.threads
    if threads is None:
        env = os.environ.get("ROUGH_FLOW_THREADS")
        try:
            threads = int(env) if env else 1
        except ValueError:
            print(f"error: ROUGH_FLOW_THREADS must be an integer, got {env!r}", file=sys.stderr)
            return 2
    if threads < 1:
        print("error: thread count must be >= 1", file=sys.stderr)
        return 2
    try:
        code, run = run_config(cfg, args.out, threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for c in run.checks:
        flag = "PASS" if c.passed else "FAIL"
        gate = "" if c.hard else " (informational)"
        print(f"{flag} {c.name}: {c.measured:.6g} {c.relation} {c.required:.6g}{gate}")
    print(f"manifest: {run.out / 'manifest.json'}")
    return code


def cmd_validate_mesh(args):
    try:
        mesh = load_mesh(args.path)
    except (MeshParseError, MeshTopologyError, OSError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({"vertices": mesh.n_vertices, "faces": mesh.n_faces,
                      "edges": mesh.n_edges, "euler_characteristic": mesh.euler_characteristic,
                      "singular": sorted(mesh.singular), "embedded": mesh.is_embedded}))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rough-flow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides the config)")
    r.add_argument("--threads", type=int, help="worker threads (env ROUGH_FLOW_THREADS)")
    r.add_argument("--seed", type=int, help="random seed (overrides the config)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate-mesh", help="parse and check an OFF mesh")
    v.add_argument("path")
    v.set_defaults(func=cmd_validate_mesh)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
