"""End-to-end orchestration behind the CLI.

Each cmd_* function implements one subcommand: ingest validates raw
trial logs into a run store, fit produces the per-distribution and
per-driver gain report, analyze adds SVD decompositions and population
permutation tests, simulate writes a synthetic corpus, nominal writes a
reference trajectory, and report renders a stored report for reading.

All outputs are deterministic for a fixed config and master seed: child
seeds derive from stable task keys, floats serialize at fixed
precision, and nothing records wall-clock time.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .analysis import (
    assemble_gain_matrix,
    linear_adequacy,
    mse,
    permutation_test,
    svd_gains,
)
from .config import RunConfig, resolved_config_dict
from .dataset import Dataset, normalize_inputs, train_valid_split
from .errors import DyadgainError, InfeasibleProblemError, SchemaError, \
    TooFewSamplesError
from .features import (
    CONTROLS,
    REGIONS,
    all_keys,
    exclusion_reason,
    prepare_trial,
    trial_samples,
)
from .gp import HyperBounds, denormalize_gain, extract_gain, fit, \
    optimize_hyperparams, predict_mean
from .nominal import NominalTrajectory, left_turn_problem, read_nominal_csv, \
    solve_nominal, straight_problem, write_nominal_csv
from .seeds import derive_seed
from .synthetic import PolicySpec, generate_corpus, scenario_nominal
from .trialio import read_store, read_trials, write_json, write_store, \
    write_trials

__all__ = [
    "cmd_ingest",
    "cmd_fit",
    "cmd_analyze",
    "cmd_simulate",
    "cmd_nominal",
    "cmd_report",
    "reference_nominal",
]

log = logging.getLogger(__name__)

MIN_POOL_SAMPLES = 10

REPORT_COLUMNS = ("site", "lead", "region", "control", "n_samples",
                  "n_train", "n_valid", "mse_valid", "beta", "lengthscale",
                  "noise_var", "adequate",
                  "g1_norm", "g2_norm", "g3_norm", "g4_norm",
                  "g1_raw", "g2_raw", "g3_raw", "g4_raw", "constant")

DRIVER_COLUMNS = ("site", "trial_id", "agent", "role", "lead", "region",
                  "control", "n_samples",
                  "g1_norm", "g2_norm", "g3_norm", "g4_norm",
                  "g1_raw", "g2_raw", "g3_raw", "g4_raw", "constant")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def reference_nominal(config: RunConfig) -> NominalTrajectory:
    """The reference trajectory deviation features measure against."""
    if config.nominal_csv:
        return read_nominal_csv(config.nominal_csv)
    return scenario_nominal()


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

def cmd_ingest(paths, config: RunConfig, out_dir) -> tuple[str, dict]:
    """Parse, validate, and exclusion-flag trial CSVs into a run store."""
    paths = list(paths)
    if not paths:
        raise SchemaError("no input files given")
    trials = []
    seen = {}
    for path in paths:
        for trial in read_trials(path):
            if trial.trial_id in seen:
                raise SchemaError(
                    f"trial {trial.trial_id!r} appears in both "
                    f"{seen[trial.trial_id]!r} and {path!r}", path=path)
            seen[trial.trial_id] = path
            trials.append(trial)
    if not trials:
        raise SchemaError("input files contain no trials")

    per_trial = []
    n_frames = 0
    n_excluded = 0
    for trial in trials:
        frames = len(trial.traj_a) + len(trial.traj_b)
        n_frames += frames
        reason = trial.exclusion_note
        if not trial.excluded:
            try:
                prepared = prepare_trial(trial)
                reason = exclusion_reason(prepared)
            except DyadgainError as exc:
                reason = str(exc)
            if reason is not None:
                trial.excluded = True
                trial.exclusion_note = reason
        if trial.excluded:
            n_excluded += 1
            log.warning("trial %s excluded: %s", trial.trial_id, reason)
        per_trial.append({
            "trial_id": trial.trial_id, "site": trial.site,
            "frames_a": len(trial.traj_a), "frames_b": len(trial.traj_b),
            "excluded": trial.excluded, "reason": reason,
        })

    report = {
        "n_files": len(paths),
        "n_trials": len(trials),
        "n_frames": n_frames,
        "n_excluded": n_excluded,
        "exclusions": {
            t["trial_id"]: t["reason"] for t in per_trial if t["excluded"]
        },
        "trials": per_trial,
    }
    store = write_store(out_dir, trials, report)
    return store, report


def load_store(store_dir):
    """Trials plus ingest report, with exclusion flags re-applied."""
    import json

    trials = read_store(store_dir)
    report_path = os.path.join(store_dir, "ingest.json")
    with open(report_path, encoding="utf-8") as fh:
        report = json.load(fh)
    for trial in trials:
        reason = report["exclusions"].get(trial.trial_id)
        if reason is not None:
            trial.excluded = True
            trial.exclusion_note = reason
    return trials, report


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _subsample(dataset: Dataset, cap: int, seed: int) -> Dataset:
    # keeps row order so capping commutes with nothing downstream
    if dataset.n <= cap:
        return dataset
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(dataset.n, size=cap, replace=False))
    return dataset.subset(idx)


def _hyper_bounds(config: RunConfig) -> HyperBounds:
    return HyperBounds(beta=config.beta_bounds,
                       lengthscale=config.lengthscale_bounds,
                       noise_var=config.noise_var_bounds)


def _region_pools(prepared_trials, nominal, config):
    """{(site, lead, region): [(trial_id, agent, sample), ...]}"""
    pools = {}
    leads = {}
    for trial in prepared_trials:
        lead, per_agent = trial_samples(
            trial, nominal, inner=config.inner_radius,
            outer=config.outer_radius, prepared=True)
        if lead is None:
            continue
        leads[trial.trial_id] = lead
        for agent, samples in per_agent.items():
            for s in samples:
                pools.setdefault((trial.site, lead, s.region), []).append(
                    (trial.trial_id, agent, s))
    return pools, leads


def _fit_distribution(pool_key, tagged, config, bounds, master_seed):
    """Fit both control channels of one (site, lead, region) pool."""
    site, lead, region = pool_key
    z = np.array([s.z for _, _, s in tagged])
    pool_seed = derive_seed(master_seed, f"pool:{site}:{lead}:{region}")
    cap_idx = None
    if len(tagged) > config.max_fit_points:
        rng = np.random.default_rng(derive_seed(pool_seed, "cap"))
        cap_idx = np.sort(rng.choice(len(tagged), config.max_fit_points,
                                     replace=False))
    z_fit = z if cap_idx is None else z[cap_idx]
    normalized_z, scaling = normalize_inputs(Dataset(z_fit,
                                                     np.zeros(len(z_fit))))
    # [-1, 1] normalization shifts by the midrange, not the mean, so the
    # normalized features keep a nonzero mean when skewed; center them so
    # the no-constant linear kernel does not have to fake an intercept
    z_mean = normalized_z.inputs.mean(axis=0)
    z_centered = normalized_z.inputs - z_mean
    rows = {}
    hypers = {}
    centers = {}
    for control in CONTROLS:
        y = np.array([getattr(s, control) for _, _, s in tagged])
        y_fit = y if cap_idx is None else y[cap_idx]
        # the zero-mean prior has no constant term, but a control channel
        # carries a constant feedforward level inside a region; center it
        # out and report it as part of the affine constant, else the fit
        # routes the level through the kernel and warps the linear gain
        y_center = float(np.mean(y_fit))
        data = Dataset(z_centered, y_fit - y_center)
        key_seed = derive_seed(pool_seed, control)
        train, valid = train_valid_split(data, seed=derive_seed(
            key_seed, "split"), train_fraction=config.split_fraction)
        opt_data = _subsample(train, config.max_opt_points,
                              derive_seed(key_seed, "optcap"))
        result = optimize_hyperparams(
            opt_data, "combined", seed=derive_seed(key_seed, "opt"),
            n_starts=config.n_starts, bounds=bounds)
        model = fit(train, "combined", result.hyper)
        valid_mse = mse(predict_mean(model, valid.inputs), valid.outputs)
        # beta, MSE, and adequacy come from the combined fit; the gain is
        # read from the linear-kernel fit.  A short-lengthscale RBF term
        # can absorb the between-trial signal of slowly varying features
        # and warp the combined fit's linear part; beta < 1 is exactly
        # the license to read the linear model instead
        lin_result = optimize_hyperparams(
            opt_data, "linear", seed=derive_seed(key_seed, "linopt"),
            n_starts=config.n_starts, bounds=bounds)
        lin_model = fit(train, "linear", lin_result.hyper)
        lin_mse = mse(predict_mean(lin_model, valid.inputs), valid.outputs)
        gain_norm = extract_gain(lin_model)
        gain_raw, constant = denormalize_gain(gain_norm, scaling)
        constant += y_center - float(gain_norm @ z_mean)
        hypers[control] = lin_result.hyper
        centers[control] = y_center
        rows[control] = {
            "site": site, "lead": lead, "region": region, "control": control,
            "n_samples": len(tagged), "n_train": train.n, "n_valid": valid.n,
            "mse_valid": valid_mse,
            "mse_valid_linear": lin_mse,
            "beta": result.hyper.beta,
            "lengthscale": result.hyper.lengthscale,
            "noise_var": result.hyper.noise_var,
            "log_marginal": result.log_marginal,
            "adequate": linear_adequacy(result.hyper, config.beta_threshold),
            "gain_normalized": gain_norm.tolist(),
            "gain_raw": gain_raw.tolist(),
            "gain_constant": constant,
        }

    # per-driver fits reuse the pooled hyperparameters and scaling so the
    # driver gains are comparable across one region's scatter
    drivers = {}
    by_driver = {}
    for trial_id, agent, s in tagged:
        by_driver.setdefault((trial_id, agent), []).append(s)
    for (trial_id, agent), samples in sorted(by_driver.items()):
        if len(samples) < config.min_driver_samples:
            log.warning("driver %s %s in %s/%s/%s: only %d samples, skipped",
                        trial_id, agent, site, lead, region, len(samples))
            continue
        zd = scaling.apply(np.array([s.z for s in samples])) - z_mean
        entry = {
            "site": site, "lead": lead, "region": region,
            "trial_id": trial_id, "agent": agent,
            "role": "lead" if agent == lead else "follower",
            "n_samples": len(samples),
        }
        for control in CONTROLS:
            # pooled center and hyperparameters keep driver gains on one
            # comparable scale across the region's scatter
            yd = np.array([getattr(s, control) for s in samples])
            model = fit(Dataset(zd, yd - centers[control]), "linear",
                        hypers[control])
            gain_norm = extract_gain(model)
            gain_raw, constant = denormalize_gain(gain_norm, scaling)
            constant += centers[control] - float(gain_norm @ z_mean)
            entry[control] = {
                "gain_normalized": gain_norm.tolist(),
                "gain_raw": gain_raw.tolist(),
                "gain_constant": constant,
            }
        drivers[f"{trial_id}:{agent}:{region}"] = entry
    return rows, drivers


def cmd_fit(store_dir, config: RunConfig, out_dir, jobs: int = 1) -> dict:
    """Fit every populated distribution and every driver; write reports."""
    trials, ingest_report = load_store(store_dir)
    live = [t for t in trials if not t.excluded]
    if not live:
        raise TooFewSamplesError("store has no usable trials")
    prepared = [prepare_trial(t) for t in live]
    nominal = reference_nominal(config)
    pools, leads = _region_pools(prepared, nominal, config)
    if not pools:
        raise TooFewSamplesError("no trial produced any feature samples")
    bounds = _hyper_bounds(config)

    fit_keys = []
    for pool_key in sorted(pools):
        if len(pools[pool_key]) < MIN_POOL_SAMPLES:
            log.warning("distribution %s/%s/%s: only %d samples, omitted",
                        *pool_key, len(pools[pool_key]))
            continue
        fit_keys.append(pool_key)

    def task(pool_key):
        return _fit_distribution(pool_key, pools[pool_key], config, bounds,
                                 config.master_seed)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(task, fit_keys))
    else:
        results = [task(k) for k in fit_keys]

    distributions = {}
    drivers = {}
    for pool_key, (rows, pool_drivers) in zip(fit_keys, results):
        site, lead, region = pool_key
        for control, row in rows.items():
            distributions[f"{site}:{lead}:{region}:{control}"] = row
        drivers.update(pool_drivers)

    sites = tuple(sorted({t.site for t in live}))
    expected = [k for k in all_keys(sites)]
    missing = [k.label() for k in expected
               if f"{k.site}:{k.lead}:{k.region}:{k.control}"
               not in distributions]
    for label in missing:
        log.warning("distribution %s: no data", label)

    report = {
        "config": resolved_config_dict(config),
        "counts": {
            "n_trials_stored": len(trials),
            "n_trials_used": len(leads),
            "n_trials_excluded": ingest_report.get("n_excluded",
                                                   len(trials) - len(live)),
            "n_samples": sum(len(v) for v in pools.values()),
            "per_region": {
                f"{site}:{lead}:{region}": len(v)
                for (site, lead, region), v in sorted(pools.items())
            },
        },
        "trial_leads": leads,
        "distributions": distributions,
        "drivers": drivers,
    }
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "report.json"), report)
    _write_csv(os.path.join(out_dir, "report.csv"), REPORT_COLUMNS,
               _report_rows(report))
    _write_csv(os.path.join(out_dir, "drivers.csv"), DRIVER_COLUMNS,
               _driver_rows(report))
    return report


def _report_rows(report):
    rows = []
    sites = sorted({r["site"] for r in report["distributions"].values()})
    for key in all_keys(sites):
        row = report["distributions"].get(
            f"{key.site}:{key.lead}:{key.region}:{key.control}")
        if row is None:
            continue
        flat = {c: row[c] for c in REPORT_COLUMNS if c in row}
        for i in range(4):
            flat[f"g{i + 1}_norm"] = row["gain_normalized"][i]
            flat[f"g{i + 1}_raw"] = row["gain_raw"][i]
        flat["constant"] = row["gain_constant"]
        rows.append(flat)
    return rows


def _driver_rows(report):
    rows = []
    for key in sorted(report["drivers"]):
        entry = report["drivers"][key]
        for control in CONTROLS:
            flat = {
                "site": entry["site"], "trial_id": entry["trial_id"],
                "agent": entry["agent"], "role": entry["role"],
                "lead": entry["lead"], "region": entry["region"],
                "control": control, "n_samples": entry["n_samples"],
            }
            for i in range(4):
                flat[f"g{i + 1}_norm"] = entry[control]["gain_normalized"][i]
                flat[f"g{i + 1}_raw"] = entry[control]["gain_raw"][i]
            flat["constant"] = entry[control]["gain_constant"]
            rows.append(flat)
    return rows


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _load_report(report_or_dir):
    if isinstance(report_or_dir, dict):
        return report_or_dir
    import json

    with open(os.path.join(report_or_dir, "report.json"),
              encoding="utf-8") as fh:
        return json.load(fh)


def _match(entry, selector) -> bool:
    return all(entry.get(k) == v for k, v in selector.items())


def cmd_analyze(report_or_dir, config: RunConfig, out_dir) -> dict:
    """SVD per distribution, configured permutation tests, plot data."""
    report = _load_report(report_or_dir)
    if not report.get("drivers"):
        raise TooFewSamplesError("fit report has no per-driver gains")

    svd = {}
    by_region = {}
    for key, row in report["distributions"].items():
        site, lead, region, control = key.rsplit(":", 3)
        by_region.setdefault((site, lead, region), {})[control] = row
    for (site, lead, region), rows in sorted(by_region.items()):
        if set(rows) != set(CONTROLS):
            log.warning("distribution %s/%s/%s: missing a control channel, "
                        "SVD skipped", site, lead, region)
            continue
        gm = assemble_gain_matrix(rows["accel"]["gain_normalized"],
                                  rows["ang_vel"]["gain_normalized"])
        dec = svd_gains(gm)
        svd[f"{site}:{lead}:{region}"] = {
            "u": dec.u.tolist(),
            "sigma": dec.sigma.tolist(),
            "v_rows": dec.v_rows.tolist(),
        }

    tests = []
    for pair in config.population_pairs:
        values = {"a": [], "b": []}
        for entry in report["drivers"].values():
            if entry["region"] != pair.region:
                continue
            for side, selector in (("a", pair.group_a), ("b", pair.group_b)):
                if _match(entry, selector):
                    values[side].append(
                        entry[pair.control]["gain_normalized"][pair.component])
        if min(len(values["a"]), len(values["b"])) < 2:
            log.warning("pair %s: a population has fewer than 2 drivers, "
                        "test skipped", pair.name)
            continue
        for kind in pair.kinds:
            res = permutation_test(
                values["a"], values["b"], kind=kind,
                n=config.n_permutations,
                seed=derive_seed(config.master_seed,
                                 f"perm:{pair.name}:{kind}"))
            tests.append({
                "pair": pair.name, "kind": kind,
                "region": pair.region, "control": pair.control,
                "component": pair.component,
                "n_a": len(values["a"]), "n_b": len(values["b"]),
                "statistic": res.statistic_observed,
                "p_value": res.p_value,
                "n_permutations": res.n_permutations,
            })

    analysis = {
        "config": resolved_config_dict(config),
        "svd": svd,
        "permutation_tests": tests,
    }
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "analysis.json"), analysis)
    _write_csv(os.path.join(out_dir, "plot_driver_gains.csv"),
               ("site", "trial_id", "agent", "role", "region", "control",
                "component", "value_norm", "value_raw"),
               _plot_rows(report))
    return analysis


def _plot_rows(report):
    rows = []
    for key in sorted(report["drivers"]):
        entry = report["drivers"][key]
        for control in CONTROLS:
            for i in range(4):
                rows.append({
                    "site": entry["site"], "trial_id": entry["trial_id"],
                    "agent": entry["agent"], "role": entry["role"],
                    "region": entry["region"], "control": control,
                    "component": i + 1,
                    "value_norm": entry[control]["gain_normalized"][i],
                    "value_raw": entry[control]["gain_raw"][i],
                })
    return rows


# ---------------------------------------------------------------------------
# simulate / nominal / report
# ---------------------------------------------------------------------------

def cmd_simulate(config: RunConfig, seed, out_dir, count=None) -> dict:
    """Generate a synthetic corpus and write CSV plus manifest."""
    sim = config.simulate
    policy = PolicySpec(gain=np.asarray(sim["gain"], dtype=float),
                        nonlin_amp=float(sim["nonlin_amp"]),
                        noise_std=tuple(sim["noise_std"]))
    n = int(sim["n_trials"] if count is None else count)
    if n < 0:
        raise ValueError("count must be nonnegative")
    trials, manifest = generate_corpus(
        n, policy, seed=int(seed), site=sim["site"],
        speed_range=tuple(sim["speed_range"]),
        offset_range=tuple(sim["offset_range"]),
        lat_offset_max=float(sim["lat_offset_max"]),
    )
    os.makedirs(out_dir, exist_ok=True)
    write_trials(os.path.join(out_dir, "corpus.csv"), trials)
    write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def cmd_nominal(config: RunConfig, out_dir) -> NominalTrajectory:
    """Solve the configured reference problem and write its CSV."""
    nom = config.nominal
    kind = nom["kind"]
    if kind == "left_turn":
        problem = left_turn_problem(
            approach=float(nom["approach"]),
            exit_dist=float(nom["exit_dist"]),
            turn_radius=float(nom["turn_radius"]),
            speed=float(nom["speed"]),
            half_width=float(nom["half_width"]),
            n_nodes=int(nom["n_nodes"]),
        )
    elif kind == "straight":
        problem = straight_problem(
            length=float(nom["length"]), speed=float(nom["speed"]),
            half_width=float(nom["half_width"]), n_nodes=int(nom["n_nodes"]),
        )
    else:
        raise ValueError(f"nominal kind must be left_turn or straight, "
                         f"got {kind!r}")
    traj = solve_nominal(problem)
    if not traj.converged:
        raise InfeasibleProblemError("nominal solve did not converge")
    os.makedirs(out_dir, exist_ok=True)
    write_nominal_csv(traj, os.path.join(out_dir, "nominal.csv"))
    return traj


def cmd_report(run_dir, out_dir=None) -> str:
    """Render a stored fit report (and analysis, if present) as text."""
    report = _load_report(run_dir)
    lines = []
    header = (f"{'distribution':<28} {'n':>6} {'mse':>12} {'beta':>10} "
              f"{'ell':>8} {'adequate':>8}")
    lines.append(header)
    lines.append("-" * len(header))
    sites = sorted({r["site"] for r in report["distributions"].values()})
    for key in all_keys(sites):
        row = report["distributions"].get(
            f"{key.site}:{key.lead}:{key.region}:{key.control}")
        if row is None:
            continue
        lines.append(
            f"{key.label():<28} {row['n_samples']:>6} "
            f"{row['mse_valid']:>12.6g} {row['beta']:>10.4g} "
            f"{row['lengthscale']:>8.3g} "
            f"{'yes' if row['adequate'] else 'no':>8}")
    counts = report["counts"]
    lines.append("")
    lines.append(f"trials used {counts['n_trials_used']} of "
                 f"{counts['n_trials_stored']} "
                 f"({counts['n_trials_excluded']} excluded), "
                 f"{counts['n_samples']} samples, "
                 f"{len(report['drivers'])} driver fits")

    analysis_path = (os.path.join(run_dir, "analysis.json")
                     if not isinstance(run_dir, dict) else None)
    if analysis_path and os.path.exists(analysis_path):
        import json

        with open(analysis_path, encoding="utf-8") as fh:
            analysis = json.load(fh)
        if analysis.get("permutation_tests"):
            lines.append("")
            lines.append(f"{'permutation test':<36} {'kind':>10} "
                         f"{'stat':>10} {'p':>8}")
            for t in analysis["permutation_tests"]:
                lines.append(f"{t['pair']:<36} {t['kind']:>10} "
                             f"{t['statistic']:>10.4g} {t['p_value']:>8.4g}")
        if analysis.get("svd"):
            lines.append("")
            for label in sorted(analysis["svd"]):
                sigma = analysis["svd"][label]["sigma"]
                lines.append(f"svd {label}: sigma = "
                             f"({sigma[0]:.6g}, {sigma[1]:.6g})")
    text = "\n".join(lines) + "\n"
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "summary.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
    return text
