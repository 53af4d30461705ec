"""Batch experiment harness.

Usage::

    corrfilt --config run.toml [--seed S] [--out DIR] [--threads K] <command>

Commands: ``validate``, ``simulate``, ``filter``, ``free-energy``, ``singularity``.
Exit codes: 0 success, 2 configuration/validation error, 3 numerical failure.

Config schema (TOML; unknown keys are errors)::

    [model]                  # linear model, matrices row-major
    kind = "linear"          # or "nonlinear" with factory = "pkg.module:function"
    A = [[-1.0]]             # scalars are accepted for 1x1 matrices
    C = [[1.0]]
    sigma0 = [[1.0]]
    sigma1 = [[0.5]]
    x0 = [1.0]
    T = 1.0

    [grid]
    level = 6

    [run]
    M = 100000               # ensemble size for Monte Carlo commands
    master_seed = 20261016
    output = "out"
    threads = 1

    [simulate]               # optional
    product = false
    reference = false

    [filter]                 # optional
    observation = "y.csv"    # path CSV; simulated from the model when absent
    observation_seed = 0     # stream id of the simulated observation

    [free_energy]            # required by free-energy
    M = 20000
    [free_energy.family]
    kind = "mean_shift"      # or "reference" / "posterior" (single candidate)
    s = [-1.0, -0.5, 0.0, 0.5, 1.0]
    direction = 1.0          # scalar or full vector over x_1..x_N

    [singularity]            # optional
    t = 1.0
    levels = [6, 7, 8, 9, 10, 11, 12]
    M = 1000
    classify = true
    classify_level = 12
    threshold_fraction = 0.5
    rn_T = 1.0
    rn_N = [8, 16, 32, 64]
    rn_M = 10000
"""

from __future__ import annotations

import argparse
import hashlib
import importlib
import sys
from pathlib import Path as FsPath

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from . import gibbs, oracle, sampler, singularity, tables
from .free_energy import (CandidateMeasure, fit_curvature, mean_shift_family,
                          minimize_over_family, posterior_law, reference_law)
from .model import (Coupling, LinearModel, ModelError, NonlinearModel, NumericalError, Path,
                    make_dyadic_grid, validate_linear, validate_nonlinear)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ModelError):
    pass


SCHEMA = {
    "model": {"kind", "A", "C", "sigma0", "sigma1", "x0", "T", "factory"},
    "grid": {"level"},
    "run": {"M", "master_seed", "output", "threads"},
    "simulate": {"product", "reference"},
    "filter": {"observation", "observation_seed"},
    "free_energy": {"M", "family"},
    "singularity": {"t", "levels", "M", "classify", "classify_level", "threshold_fraction",
                    "rn_T", "rn_N", "rn_M"},
}
FAMILY_KEYS = {"kind", "s", "direction"}


class Run:
    """Parsed configuration plus global overrides."""

    def __init__(self, raw: dict, config_bytes: bytes, seed=None, out=None, threads=None):
        self.raw = raw
        self.config_hash = hashlib.sha256(config_bytes).hexdigest()[:16]
        _check_keys(raw)
        run = raw.get("run", {})
        self.M = int(run.get("M", 10000))
        self.master_seed = int(seed if seed is not None else run.get("master_seed", 0))
        self.out = FsPath(out if out is not None else run.get("output", "out"))
        self.threads = int(threads if threads is not None else run.get("threads", 1))
        if "model" not in raw:
            raise ConfigError("missing [model] section")
        if "grid" not in raw or "level" not in raw["grid"]:
            raise ConfigError("missing [grid] level")
        self.model = _build_model(raw["model"])
        self.grid = make_dyadic_grid(int(raw["grid"]["level"]), self.model.T)
        self.seed = sampler.SeedSpec(self.master_seed, 0)

    def section(self, name: str) -> dict:
        return self.raw.get(name, {})

    def header(self, *extra) -> list[str]:
        return [f"corrfilt {__version__} config_sha256={self.config_hash} "
                f"master_seed={self.master_seed}", *extra]

    def require_linear(self) -> LinearModel:
        if not isinstance(self.model, LinearModel):
            raise ConfigError("this command needs a linear model")
        return self.model

    def path(self, name: str) -> FsPath:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name


def _check_keys(raw: dict):
    for section, body in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        unknown = set(body) - SCHEMA[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    fam = raw.get("free_energy", {}).get("family")
    if fam is not None:
        if not isinstance(fam, dict):
            raise ConfigError("[free_energy.family] must be a table")
        unknown = set(fam) - FAMILY_KEYS
        if unknown:
            raise ConfigError(f"unknown key(s) in [free_energy.family]: "
                              f"{', '.join(sorted(unknown))}")


def _build_model(sec: dict):
    kind = sec.get("kind", "linear")
    if kind == "linear":
        missing = {"A", "C", "sigma0", "sigma1", "x0"} - set(sec)
        if missing:
            raise ConfigError(f"[model] missing {', '.join(sorted(missing))}")
        if "factory" in sec:
            raise ConfigError("[model] factory is only valid for nonlinear models")
        try:
            model = LinearModel(A=sec["A"], C=sec["C"], sigma0=sec["sigma0"],
                                sigma1=sec["sigma1"], x0=sec["x0"], T=sec.get("T", 1.0))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[model] malformed matrices: {exc}") from exc
        validate_linear(model).raise_if_failed()
        return model
    if kind == "nonlinear":
        if "factory" not in sec:
            raise ConfigError("nonlinear [model] needs factory = 'module:function'")
        mod, _, fn = sec["factory"].partition(":")
        try:
            model = getattr(importlib.import_module(mod), fn)()
        except (ImportError, AttributeError) as exc:
            raise ConfigError(f"cannot load model factory {sec['factory']!r}: {exc}") from exc
        if not isinstance(model, NonlinearModel):
            raise ConfigError("model factory must return a NonlinearModel")
        validate_nonlinear(model).raise_if_failed()
        return model
    raise ConfigError(f"unknown model kind {kind!r}")


# --- commands ---------------------------------------------------------------------

def cmd_validate(run: Run) -> list[str]:
    print(f"model ok: d={run.model.d} n={run.model.n} grid level={run.grid.level}")
    return []


def cmd_simulate(run: Run) -> list[str]:
    model, grid = run.model, run.grid
    opts = run.section("simulate")
    written = []
    pair = sampler.simulate_joint(model, grid, run.seed)
    hdr = run.header(f"grid_level={grid.level} stream_id=0")
    for name, p, prefix in (("joint_x.csv", pair.x, "x"), ("joint_y.csv", pair.y, "y")):
        tables.write_path(p, run.path(name), prefix, hdr)
        written.append(name)
    if opts.get("product", False):
        prod = sampler.simulate_product(model, grid, run.seed)
        tables.write_path(prod.x, run.path("product_x.csv"), "x", hdr)
        tables.write_path(prod.y, run.path("product_y.csv"), "y", hdr)
        written += ["product_x.csv", "product_y.csv"]
    if opts.get("reference", False):
        ref = sampler.sample_reference(run.require_linear(), grid, pair.y,
                                       run.seed.child(3))
        tables.write_path(ref, run.path("reference_x.csv"), "x", hdr)
        written.append("reference_x.csv")
    return written


def _observation(run: Run) -> Path:
    sec = run.section("filter")
    if "observation" in sec:
        y = tables.read_path(sec["observation"])
        if y.grid.level < run.grid.level:
            raise ConfigError("observation file is coarser than the grid")
        return y.subsample(run.grid.level)
    stream = int(sec.get("observation_seed", 0))
    return sampler.simulate_joint(run.model, run.grid,
                                  sampler.SeedSpec(run.master_seed, stream)).y


def cmd_filter(run: Run) -> list[str]:
    model, grid = run.require_linear(), run.grid
    y = _observation(run)
    law = oracle.build_discrete_joint_law(model, grid)
    post = oracle.condition_on_observations(law, y)
    o_track = oracle.law_to_track(post, grid, model.x0)
    k_track = oracle.kalman_correlated(model, grid, y)
    is_seed = run.seed.child(11)
    ens, g_track = gibbs.importance_posterior(model, grid, y, run.M, is_seed, run.threads)
    log_z, log_z_se = gibbs.estimate_log_normalizer(model, grid, y, run.M, is_seed,
                                                    run.threads)
    hdr = run.header(f"model_hash={model.fingerprint()} grid_level={grid.level}")
    out = []
    for name, track in (("oracle_track.csv", o_track), ("kalman_track.csv", k_track),
                        ("gibbs_track.csv", g_track)):
        tables.write_track(track, run.path(name), hdr)
        out.append(name)
    tables.write_path(y, run.path("observation.csv"), "y", hdr)
    tables.write_ensemble(ens, is_seed.stream_id, run.path("gibbs_ensemble.csv"), hdr)
    out += ["observation.csv", "gibbs_ensemble.csv"]

    se = np.where(g_track.mean_se[1:] > 0, g_track.mean_se[1:], np.inf)
    dev = np.abs(g_track.means[1:] - o_track.means[1:]) / se
    rows = [
        ["max_mean_deviation_se", dev.max()],
        ["terminal_mean_oracle", o_track.means[-1, 0]],
        ["terminal_mean_gibbs", g_track.means[-1, 0]],
        ["terminal_mean_se", g_track.mean_se[-1, 0]],
        ["terminal_var_oracle", o_track.variances[-1, 0]],
        ["terminal_var_gibbs", g_track.variances[-1, 0]],
        ["terminal_var_se", g_track.var_se[-1, 0]],
        ["terminal_mean_kalman", k_track.means[-1, 0]],
        ["ess", g_track.ess],
        ["log_z_estimate", log_z],
        ["log_z_se", log_z_se],
        ["log_z_exact", oracle.exact_log_normalizer(model, grid, y)],
    ]
    if np.all(model.sigma1 == 0):
        _, mn = gibbs.mitter_newton_posterior(model, grid, y, run.M, run.seed.child(12),
                                              run.threads)
        comb = np.sqrt(mn.mean_se[1:] ** 2 + g_track.mean_se[1:] ** 2)
        rows.append(["uncorrelated_max_deviation_se",
                     (np.abs(mn.means[1:] - g_track.means[1:]) / comb).max()])
        tables.write_track(mn, run.path("mitter_newton_track.csv"), hdr)
        out.append("mitter_newton_track.csv")
    tables.write_csv(run.path("filter_summary.csv"), ["metric", "value"], rows, hdr)
    out.append("filter_summary.csv")
    print(f"max |IS - oracle| mean deviation: {dev.max():.3f} SE")
    return out


def _family(run: Run, post, ref, grid):
    sec = run.section("free_energy")
    fam = sec.get("family")
    if fam is None:
        raise ConfigError("free-energy needs a [free_energy.family] section")
    kind = fam.get("kind", "mean_shift")
    if kind == "reference":
        return [CandidateMeasure(ref, "reference")], None
    if kind == "posterior":
        return [CandidateMeasure(post, "posterior")], None
    if kind == "mean_shift":
        s_values = [float(s) for s in fam.get("s", [-1.0, -0.5, 0.0, 0.5, 1.0])]
        v = np.asarray(fam.get("direction", 1.0), dtype=float)
        if v.ndim and v.size != post.dim:
            raise ConfigError(f"direction must be a scalar or have length {post.dim}")
        return mean_shift_family(post, v, s_values), (s_values, v)
    raise ConfigError(f"unknown family kind {kind!r}")


def cmd_free_energy(run: Run) -> list[str]:
    model, grid = run.require_linear(), run.grid
    if "free_energy" not in run.raw:
        raise ConfigError("free-energy needs a [free_energy] section")
    M = int(run.section("free_energy").get("M", run.M))
    y = _observation(run)
    post = posterior_law(model, grid, y)
    ref = reference_law(model, grid, y)
    family, shift = _family(run, post, ref, grid)
    _, best, reports = minimize_over_family(model, grid, y, family, M, run.seed.child(21),
                                               post)
    hdr = run.header(f"model_hash={model.fingerprint()} grid_level={grid.level}")
    tables.write_reports(reports, run.path("free_energy.csv"), hdr)
    out = ["free_energy.csv"]
    if shift is not None:
        s_values, v = shift
        vv = np.broadcast_to(v, post.mean.shape)
        tables.write_plot_data(s_values, [r.total for r in reports],
                               run.path("free_energy_plot.csv"), hdr)
        out.append("free_energy_plot.csv")
        curv = fit_curvature(s_values, [r.total for r in reports]) if len(s_values) > 2 \
            else float("nan")
        print(f"argmin: {best.label}; curvature {curv:.4g} vs closed form "
              f"{vv @ np.linalg.solve(post.cov, vv):.4g}")
    worst = min(r.gibbs_gap + 3 * r.gap_standard_error for r in reports)
    print(f"{len(reports)} candidate(s); min(gap + 3 SE) = {worst:.4g}")
    return out


def cmd_singularity(run: Run) -> list[str]:
    model = run.model
    sec = run.section("singularity")
    t = float(sec.get("t", model.T))
    levels = [int(v) for v in sec.get("levels", range(6, 13))]
    M = int(sec.get("M", 1000))
    hdr = run.header(f"t={t:g} M={M}")
    out = []
    decay_cols = ["level", "mean_norm", "var", "mean_norm_se", "mean_q", "mean_q_se",
                  "target_norm"]

    def decay_rows(rows):
        return [[r.level, r.mean_norm, r.var, r.mean_norm_se, np.linalg.norm(r.mean),
                 np.linalg.norm(r.mean_se), r.target_norm] for r in rows]

    if sec.get("classify", True):
        # refuse early when the model cannot separate the two measures
        grid = make_dyadic_grid(int(sec.get("classify_level", 12)), model.T)
        probe = sampler.simulate_joint(model, grid, run.seed.child(40))
        singularity.classify_coupling(probe, model, float(sec.get("threshold_fraction", 0.5)))

    product = singularity.covariation_decay_study(model, t, levels, M, run.seed.child(31),
                                                  "product", run.threads)
    joint = singularity.covariation_decay_study(model, t, levels, M, run.seed.child(32),
                                                "joint", run.threads)
    tables.write_csv(run.path("covariation_product.csv"), decay_cols, decay_rows(product), hdr)
    tables.write_csv(run.path("covariation_joint.csv"), decay_cols, decay_rows(joint), hdr)
    slope = singularity.log2_variance_slope(product) if len(product) > 1 else float("nan")
    tables.write_plot_data([r.level for r in product], [np.log2(r.var) for r in product],
                           run.path("covariation_variance_plot.csv"), hdr)
    out += ["covariation_product.csv", "covariation_joint.csv",
            "covariation_variance_plot.csv"]
    print(f"log2 variance slope {slope:.3f} (expected band [-1.3, -0.7])")

    if isinstance(model, LinearModel):
        grid = make_dyadic_grid(max(levels), model.T)
        Xj, Yj = sampler.simulate_joint_ensemble(model, grid, run.seed.child(33), M,
                                                 run.threads)
        Xp, Yp = sampler.simulate_product_ensemble(model, grid, run.seed.child(34), M,
                                                   run.threads)
        rows = []
        for tag, (X, Y) in (("joint", (Xj, Yj)), ("product", (Xp, Yp))):
            blocks = singularity.qv_blocks_ensemble(X, Y, model.T)
            mean, se = blocks.mean(0), blocks.std(0, ddof=1) / np.sqrt(M)
            expected = singularity.expected_qv_blocks(model, tag)
            for i, j in np.ndindex(mean.shape):
                rows.append([tag, i, j, mean[i, j], se[i, j], expected[i, j]])
        tables.write_csv(run.path("qv_blocks.csv"),
                         ["coupling", "row", "col", "estimate", "se", "expected"], rows, hdr)
        out.append("qv_blocks.csv")

    if sec.get("classify", True):
        res = singularity.classification_experiment(
            model, int(sec.get("classify_level", 12)), M, run.seed.child(35),
            float(sec.get("threshold_fraction", 0.5)), run.threads)
        tables.write_csv(run.path("classification.csv"),
                         ["level", "M", "joint_error_rate", "product_error_rate"],
                         [[res.level, res.M, res.joint_error_rate, res.product_error_rate]],
                         hdr)
        out.append("classification.csv")

    rn_T = float(sec.get("rn_T", 1.0))
    rn_N = [int(v) for v in sec.get("rn_N", [8, 16, 32, 64])]
    rn_M = int(sec.get("rn_M", 10000))
    for meas in (Coupling.PRODUCT, Coupling.JOINT):
        rows = singularity.rn_degeneration_experiment(rn_T, rn_N, rn_M, meas,
                                                      run.seed.child(36))
        name = f"rn_{meas.value}.csv"
        tables.write_csv(run.path(name),
                         ["N", "delta_t", "mean_log_rn", "sd_log_rn", "sampling_measure"],
                         [[r.N, r.delta_t, r.mean_log_rn, r.sd_log_rn, r.sampling_measure]
                          for r in rows], hdr)
        tables.write_plot_data([r.N for r in rows], [r.mean_log_rn for r in rows],
                               run.path(f"rn_{meas.value}_plot.csv"), hdr)
        out += [name, f"rn_{meas.value}_plot.csv"]
    return out


COMMANDS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "free-energy": cmd_free_energy,
    "singularity": cmd_singularity,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="corrfilt", description=__doc__.split("\n")[0])
    p.add_argument("--config", required=True, help="TOML experiment configuration")
    p.add_argument("--seed", type=int, help="master seed (overrides [run] master_seed)")
    p.add_argument("--out", help="output directory (overrides [run] output)")
    p.add_argument("--threads", type=int, help="worker threads; never changes results")
    p.add_argument("command", choices=sorted(COMMANDS))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        data = FsPath(args.config).read_bytes()
        try:
            raw = tomllib.loads(data.decode())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        run = Run(raw, data, args.seed, args.out, args.threads)
        written = COMMANDS[args.command](run)
    # LinAlgError subclasses ValueError, so numerical failures are caught first
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name in written:
        print(run.out / name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
