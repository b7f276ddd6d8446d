"""Run configuration: a single YAML file drives every subcommand.

Values the source material states (region radii, split fraction, fold
count, permutation count, adequacy threshold, hyperparameter bounds)
are defaults here; everything a run resolves is echoed back into its
output directory so runs stay self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import yaml

__all__ = [
    "RunConfig",
    "PopulationPair",
    "load_config",
    "resolved_config_dict",
]

SELECTOR_KEYS = ("site", "lead", "agent", "role")

SIMULATE_DEFAULTS = {
    "n_trials": 30,
    "site": "ISR",
    "gain": [[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]],
    "nonlin_amp": 0.0,
    "noise_std": [0.01, 0.01],
    "speed_range": [3.0, 8.0],
    "offset_range": [0.0, 3.0],
    "lat_offset_max": 0.6,
}

NOMINAL_DEFAULTS = {
    "kind": "left_turn",
    "approach": 25.0,
    "exit_dist": 25.0,
    "turn_radius": 8.0,
    "length": 40.0,
    "speed": 5.0,
    "half_width": 2.0,
    "n_nodes": 50,
}


@dataclass(frozen=True)
class PopulationPair:
    """One configured permutation comparison between driver groups.

    Selectors are dicts over (site, lead, agent, role); role picks the
    driver's part in its trial, "lead" or "follower".  component indexes
    the compared gain entry, 0..3.
    """

    name: str
    group_a: dict
    group_b: dict
    region: str = "intersection"
    control: str = "accel"
    component: int = 0
    kinds: tuple = ("mean_diff", "var_diff")

    def __post_init__(self):
        for label, sel in (("group_a", self.group_a),
                           ("group_b", self.group_b)):
            unknown = set(sel) - set(SELECTOR_KEYS)
            if unknown:
                raise ValueError(
                    f"pair {self.name!r} {label}: unknown selector keys "
                    f"{sorted(unknown)}")
        if not 0 <= self.component <= 3:
            raise ValueError(f"pair {self.name!r}: component must be 0..3")
        if self.region not in ("approach", "intersection", "exit"):
            raise ValueError(f"pair {self.name!r}: unknown region "
                             f"{self.region!r}")
        if self.control not in ("accel", "ang_vel"):
            raise ValueError(f"pair {self.name!r}: unknown control "
                             f"{self.control!r}")
        for kind in self.kinds:
            if kind not in ("mean_diff", "var_diff"):
                raise ValueError(f"pair {self.name!r}: unknown statistic "
                                 f"kind {kind!r}")
        object.__setattr__(self, "kinds", tuple(self.kinds))


@dataclass(frozen=True)
class RunConfig:
    inputs: tuple = ()
    inner_radius: float = 10.0
    outer_radius: float = 25.0
    beta_threshold: float = 1.0
    split_fraction: float = 0.8
    cv_folds: int = 5
    n_permutations: int = 1000
    n_starts: int = 8
    beta_bounds: tuple = (1e-2, 1e2)
    lengthscale_bounds: tuple = (1e-2, 10.0)
    noise_var_bounds: tuple = (1e-4, 1.0)
    master_seed: int = 0
    max_fit_points: int = 1000
    max_opt_points: int = 400
    min_driver_samples: int = 10
    nominal_csv: str | None = None
    population_pairs: tuple = ()
    simulate: dict = field(default_factory=lambda: dict(SIMULATE_DEFAULTS))
    nominal: dict = field(default_factory=lambda: dict(NOMINAL_DEFAULTS))

    def __post_init__(self):
        if not 0.0 < self.inner_radius < self.outer_radius:
            raise ValueError("need 0 < inner_radius < outer_radius")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.cv_folds < 2:
            raise ValueError("cv_folds must be at least 2")
        if self.n_permutations < 1 or self.n_starts < 1:
            raise ValueError("counts must be positive")
        if self.max_fit_points < 10 or self.max_opt_points < 10:
            raise ValueError("point caps must be at least 10")
        if self.min_driver_samples < 2:
            raise ValueError("min_driver_samples must be at least 2")
        for name in ("beta_bounds", "lengthscale_bounds", "noise_var_bounds"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo < hi:
                raise ValueError(f"{name} must satisfy 0 < lo < hi")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "population_pairs",
                           tuple(self.population_pairs))


def _merge_section(raw, defaults, section):
    if raw is None:
        return dict(defaults)
    if not isinstance(raw, dict):
        raise ValueError(f"config section {section!r} must be a mapping")
    unknown = set(raw) - set(defaults)
    if unknown:
        raise ValueError(
            f"config section {section!r}: unknown keys {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(raw)
    return merged


def load_config(path=None, *, overrides=None) -> RunConfig:
    """Load YAML config; None path gives pure defaults.

    Unknown keys raise so typos cannot silently fall back to defaults;
    overrides (seed from the command line, for instance) replace fields
    after the file is applied.
    """
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError("config root must be a mapping")
    known_sections = {"run", "simulate", "nominal"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")

    run_raw = raw.get("run") or {}
    if not isinstance(run_raw, dict):
        raise ValueError("config section 'run' must be a mapping")
    run_fields = {f.name for f in fields(RunConfig)} - {"simulate", "nominal"}
    unknown = set(run_raw) - run_fields
    if unknown:
        raise ValueError(f"config section 'run': unknown keys "
                         f"{sorted(unknown)}")
    kwargs = dict(run_raw)
    if "population_pairs" in kwargs:
        kwargs["population_pairs"] = tuple(
            PopulationPair(**p) for p in kwargs["population_pairs"])
    for name in ("beta_bounds", "lengthscale_bounds", "noise_var_bounds"):
        if name in kwargs:
            kwargs[name] = tuple(float(v) for v in kwargs[name])
    kwargs["simulate"] = _merge_section(raw.get("simulate"),
                                        SIMULATE_DEFAULTS, "simulate")
    kwargs["nominal"] = _merge_section(raw.get("nominal"),
                                       NOMINAL_DEFAULTS, "nominal")
    config = RunConfig(**kwargs)
    if overrides:
        config = replace(config, **overrides)
    return config


def resolved_config_dict(config: RunConfig) -> dict:
    """The fully resolved configuration as plain data, for run echo."""
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if f.name == "population_pairs":
            value = [
                {"name": p.name, "group_a": p.group_a, "group_b": p.group_b,
                 "region": p.region, "control": p.control,
                 "component": p.component, "kinds": list(p.kinds)}
                for p in value
            ]
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out
