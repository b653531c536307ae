"""Declarative experiment configuration.

Configs are flat INI files (one section per module, simple key=value
pairs) with every default prefilled per experiment; anything the user
overrides is listed in the run manifest so replays are auditable.
"""

from __future__ import annotations

import configparser
import hashlib
import io

from .errors import ConfigurationError

EXPERIMENTS = (
    "ex1_moments", "ex2_adaptive_etkf", "ex3_stoch_param", "ex4_twoscale",
    "ex5_spekf", "ex6_diffusion", "ex7_semiparam",
)

# one flat table of defaults per experiment; strings keep the INI format
# round-trippable and diff-friendly
DEFAULTS = {
    "ex1_moments": {
        "moments": dict(a="-1.0", b="0.1", mean0="0.5", var0="0.01",
                        t_end="0.5", h="0.005", n_samples="100000",
                        n_out="20"),
    },
    "ex2_adaptive_etkf": {
        "models": dict(n="40", theta_true="1.0", theta_model="1.2",
                       forcing="8.0", dt_obs="0.05", dt_int="0.005",
                       r_true="1.0"),
        "adaptive": dict(q1_0="0.1", q2_0="0.0", r0="2.0", lag="2"),
        "experiment": dict(cycles="2000", ensembles="10,20", discard="200"),
    },
    "ex3_stoch_param": {
        "models": dict(forcing="20.0", h_truth="0.001", dt_sample="0.005",
                       r_true="0.1"),
        "experiment": dict(fit_batch="6", fit_t="40.0", sweep="0.05,0.1,0.2",
                           cycles="600", inflation="1.1", clim_batch="40",
                           clim_t="100.0"),
    },
    "ex4_twoscale": {
        "models": dict(a11="-1.0", a12="1.0", a21="-1.0", a22="-1.0",
                       sigma_x2="2.0", sigma_y2="2.0"),
        "experiment": dict(eps_grid="0.01,0.05,0.1,0.25,0.5,0.75,1.0",
                           dt="1.0", cycles="100000", r_frac="0.5",
                           discard="1000"),
    },
    "ex5_spekf": {
        "models": dict(eps="1.0", gamma_hat="1.2", omega="0.0",
                       gamma_b="0.5", omega_b="0.0", d_gamma="20.0",
                       sigma_x="0.5", sigma_b="0.5", sigma_gamma="20.0"),
        "experiment": dict(dt_obs="0.5", cycles="2000", r_frac="0.5",
                           n_mc="10000", h_truth="0.001", h_mc="0.01",
                           discard="50"),
    },
    "ex6_diffusion": {
        "diffusion": dict(n_train="5000", tau="0.1", n_modes="50",
                          bandwidth="auto", bump_std="3.0"),
        "experiment": dict(n_ens="5000", t_forecast="0.5",
                           horizon_units="20.0", h_int="0.005"),
    },
    "ex7_semiparam": {
        "experiment": dict(n_train="5000", dt_obs="0.05", horizon="10.0",
                           lead_step="0.25", n_launches="100",
                           n_members="86", n_modes="25", r_true="0.1"),
    },
}

_VALIDATORS = {
    ("ex4_twoscale", "experiment", "eps_grid"):
        lambda v: all(float(x) > 0 for x in v.split(",")),
    ("ex5_spekf", "models", "eps"): lambda v: float(v) > 0,
    ("ex5_spekf", "models", "d_gamma"): lambda v: float(v) > 0,
    ("ex2_adaptive_etkf", "experiment", "ensembles"):
        lambda v: all(int(x) >= 2 for x in v.split(",")),
    ("ex6_diffusion", "diffusion", "n_train"): lambda v: int(v) > 0,
    ("ex7_semiparam", "experiment", "n_members"): lambda v: int(v) >= 2,
}


class ExperimentConfig:
    """Experiment id, seed, output directory and the per-module sections."""

    def __init__(self, experiment_id, seed=0, out="results", sections=None):
        if experiment_id not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment id {experiment_id!r}")
        self.experiment_id = experiment_id
        self.seed = int(seed)
        self.out = str(out)
        self.sections = {sec: dict(vals)
                         for sec, vals in DEFAULTS[experiment_id].items()}
        self.overrides = []
        if sections:
            for sec, vals in sections.items():
                for key, value in vals.items():
                    self.set(sec, key, value)

    def set(self, section, key, value):
        if section not in self.sections or key not in self.sections[section]:
            raise ConfigurationError(
                f"unknown option [{section}] {key} for {self.experiment_id}")
        if str(value) != self.sections[section][key]:
            self.overrides.append(f"{section}.{key}={value}")
        self.sections[section][key] = str(value)

    # typed getters -------------------------------------------------------

    def get(self, section, key):
        return self.sections[section][key]

    def get_float(self, section, key):
        return float(self.sections[section][key])

    def get_int(self, section, key):
        return int(self.sections[section][key])

    def get_floats(self, section, key):
        return [float(x) for x in self.sections[section][key].split(",")]

    def get_ints(self, section, key):
        return [int(x) for x in self.sections[section][key].split(",")]

    # persistence ---------------------------------------------------------

    def dump(self):
        parser = configparser.ConfigParser()
        parser["experiment"] = {"id": self.experiment_id,
                                "seed": str(self.seed), "out": self.out}
        for sec in sorted(self.sections):
            body = {k: self.sections[sec][k] for k in sorted(self.sections[sec])}
            name = sec if sec != "experiment" else "experiment.params"
            parser[name] = body
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def config_hash(self):
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()[:16]

    def validate(self):
        """Schema/invariant problems plus the list of non-default overrides."""
        problems = []
        for sec, vals in self.sections.items():
            for key, value in vals.items():
                rule = _VALIDATORS.get((self.experiment_id, sec, key))
                try:
                    if key != "bandwidth" and key != "ensembles" \
                            and key != "sweep" and key != "eps_grid":
                        float(value.split(",")[0])
                    if rule is not None and not rule(value):
                        problems.append(
                            f"[{sec}] {key}={value} violates an invariant")
                except ValueError:
                    problems.append(f"[{sec}] {key}={value} is not numeric")
        # cross-field invariants
        if self.experiment_id == "ex4_twoscale":
            a11 = self.get_float("models", "a11")
            a12 = self.get_float("models", "a12")
            a21 = self.get_float("models", "a21")
            a22 = self.get_float("models", "a22")
            if a11 - a12 * a21 / a22 >= 0:
                problems.append("averaged slow drift must be negative")
            for eps in self.get_floats("experiment", "eps_grid"):
                if eps <= 0:
                    problems.append("eps grid entries must be positive")
        return problems, list(self.overrides)


def load_config(path):
    """Read an INI config produced by :meth:`ExperimentConfig.dump`."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"cannot read config file {path}")
    if "experiment" not in parser or "id" not in parser["experiment"]:
        raise ConfigurationError("config needs an [experiment] section with id")
    exp = parser["experiment"]
    cfg = ExperimentConfig(exp["id"], seed=exp.get("seed", "0"),
                           out=exp.get("out", "results"))
    for sec in parser.sections():
        if sec == "experiment":
            continue
        target = "experiment" if sec == "experiment.params" else sec
        for key, value in parser[sec].items():
            cfg.set(target, key, value)
    return cfg
