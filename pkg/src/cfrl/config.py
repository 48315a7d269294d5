"""Experiment configuration files.

Same ``[section]`` / ``key = value`` syntax as the model description files.
Every key is checked against the list below; unknown keys, unknown sections
and missing referenced files are errors carrying the offending line number.
Relative paths are resolved against the config file's directory.
"""

import hashlib
import os
from dataclasses import dataclass, field

from . import textfmt
from .errors import ConfigError

KEYS = {
    "run": {"seed", "workers", "out"},
    "env": {"kind", "preset", "width", "height", "n_boxes", "horizon", "p_mask", "window",
            "alpha", "pomdp"},
    "model": {"epsilon"},
    "data": {"episodes", "behavior", "buffer"},
    "eval": {"estimator", "target", "behavior", "buffer", "t", "t_list", "n_cf", "n_rollouts", "mode"},
    "search": {"algo", "iterations", "n_rollouts", "n_cf", "refresh_period", "eta", "kappa", "tau_c",
               "n_eval", "n_final", "checkpoint_every", "expert", "chunk", "policy"},
    "verify": {"random_scms", "fixtures"},
}
CHOICES = {
    ("env", "kind"): {"grid", "twodoor", "file"},
    ("env", "preset"): {"desk", "large"},
    ("eval", "estimator"): {"is", "snis", "mb", "cf", "sweep"},
    ("search", "algo"): {"mbps", "cfgps", "gpslike"},
    ("search", "expert"): {"yes", "no"},
    ("eval", "mode"): {"ordinary", "self_normalized"},
}
# keys whose value names an input file that must exist (unless it is a built-in name)
FILE_KEYS = {("env", "pomdp"), ("eval", "buffer"), ("search", "policy")}
POLICY_KEYS = {("data", "behavior"), ("eval", "target"), ("eval", "behavior")}
BUILTIN_POLICIES = {"uniform", "follow_hint", "expert"}


@dataclass
class ExperimentConfig:
    path: str
    text: str
    sections: dict = field(default_factory=dict)

    @property
    def digest(self):
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    @property
    def base_dir(self):
        return os.path.dirname(os.path.abspath(self.path))

    def has(self, section):
        return section in self.sections

    def get(self, section, key, default=None):
        sec = self.sections.get(section)
        return default if sec is None else sec.get(key, default)

    def line(self, section, key):
        sec = self.sections.get(section)
        return None if sec is None else sec.line_of(key)

    def int(self, section, key, default=None):
        v = self.get(section, key)
        return default if v is None else textfmt.parse_int(v, self.line(section, key))

    def float(self, section, key, default=None):
        v = self.get(section, key)
        return default if v is None else textfmt.parse_float(v, self.line(section, key))

    def int_list(self, section, key):
        v = self.get(section, key)
        if v is None:
            return None
        return [textfmt.parse_int(x, self.line(section, key)) for x in textfmt.split_list(v)]

    def resolve(self, value):
        return os.path.normpath(value if os.path.isabs(value) else os.path.join(self.base_dir, value))

    def require(self, section, key):
        if section not in self.sections:
            raise ConfigError(f"missing section [{section}]")
        return self.sections[section].require(key)


def parse_config(text, path="<config>"):
    sections = {}
    for sec in textfmt.parse(text, set(KEYS)):
        if sec.name in sections:
            raise ConfigError(f"duplicate section [{sec.name}]", sec.lineno)
        sec.check_keys(KEYS[sec.name])
        sections[sec.name] = sec
    cfg = ExperimentConfig(path, text, sections)
    for (sname, key), allowed in CHOICES.items():
        v = cfg.get(sname, key)
        if v is not None and v not in allowed:
            raise ConfigError(f"[{sname}] {key} = {v!r} is not one of {sorted(allowed)}",
                              cfg.line(sname, key))
    for sname, key in FILE_KEYS | POLICY_KEYS:
        v = cfg.get(sname, key)
        if v is None or ((sname, key) in POLICY_KEYS and v in BUILTIN_POLICIES):
            continue
        if not os.path.exists(cfg.resolve(v)):
            raise ConfigError(f"[{sname}] {key}: file {v!r} does not exist", cfg.line(sname, key))
    for v in textfmt.split_list(cfg.get("verify", "fixtures")):
        if not os.path.exists(cfg.resolve(v)):
            raise ConfigError(f"[verify] fixtures: file {v!r} does not exist", cfg.line("verify", "fixtures"))
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror}") from None
    return parse_config(text, path)
