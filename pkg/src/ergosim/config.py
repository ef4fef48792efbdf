"""Sectioned key-value experiment configs and their validation.

Grammar (one construct per line):

    [section]            sections: model, functional, schedule,
                         experiment, output, run
    key = value          scalars: int, float, bool (true/false), string
    key = [v1, v2, ...]  arrays of numbers
    # comment            full-line comments; blank lines ignored

Validation is whole-file: every problem found is reported, not just the
first, and unknown keys are named together with their section.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .euler import SchedulePolicy, StepSchedule
from .models import FunctionalSpec, SdeModel, builtin_model


class ConfigError(Exception):
    """Raised with the full list of validation problems."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid config:\n" + "\n".join(f"  - {e}" for e in self.errors))


_SECTIONS = {
    "model": {"family", "kappa", "mu", "sigma", "alpha", "x0",
              "drift_coeffs", "diffusion_coeffs", "recurrence_alpha",
              "recurrence_gamma", "recurrence_radius", "holder_nu",
              "alpha_bar", "support_lo"},
    "functional": {"coeffs", "centralize", "name"},
    "schedule": {"regime", "theta", "c_step", "gamma_mdp"},
    "experiment": {"kind", "epsilon_list", "horizon", "replicates", "levels"},
    "output": {"directory", "formats", "snapshots"},
    "run": {"seed", "threads"},
}

_KINDS = ("LLN_RATE", "CLT_NORMALITY", "MDP_TAIL", "SCHEDULE_VIOLATION",
          "RIEMANN_VS_CONTINUOUS")
_REGIMES = ("LLN", "CLT", "MDP")


@dataclass
class RunConfig:
    model: SdeModel
    functional: FunctionalSpec
    policy: SchedulePolicy
    regime: str
    kind: str
    epsilon_list: tuple
    horizon: float
    replicates: int
    levels: tuple
    centralize: bool
    out_dir: str
    formats: tuple
    snapshots: bool
    seed: int
    threads: Optional[int]  # None = auto
    raw: dict = field(default_factory=dict)


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(v) for v in inner.split(",")]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_text(text: str) -> dict:
    """Parse the raw sectioned key-value text into nested dicts.

    Syntax errors and unknown sections/keys are collected and raised
    together as a single :class:`ConfigError`.
    """
    data, errors = _parse_sections(text)
    if errors:
        raise ConfigError(errors)
    return data


def _parse_sections(text: str):
    data: dict = {}
    errors: list = []
    section = None
    for ln, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SECTIONS:
                errors.append(f"line {ln}: unknown section [{section}]")
                section = None
            else:
                data.setdefault(section, {})
            continue
        if "=" not in line:
            errors.append(f"line {ln}: expected 'key = value', got {line!r}")
            continue
        if section is None:
            errors.append(f"line {ln}: key outside any section")
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _SECTIONS[section]:
            errors.append(f"unknown key {key!r} in section [{section}]")
            continue
        data[section][key] = _parse_value(val)
    return data, errors


def _build_custom_model(sec: dict, errors: list) -> Optional[SdeModel]:
    need = ("drift_coeffs", "diffusion_coeffs", "recurrence_alpha",
            "recurrence_gamma", "recurrence_radius", "holder_nu", "alpha_bar")
    missing = [k for k in need if k not in sec]
    if missing:
        errors.append(f"[model] custom family requires keys: {', '.join(missing)}")
        return None
    bc = np.asarray(sec["drift_coeffs"], dtype=float)
    sc = np.asarray(sec["diffusion_coeffs"], dtype=float)
    lo = sec.get("support_lo")
    probes = np.asarray([abs(v) for v in sc])
    try:
        return SdeModel(
            dim_state=1,
            dim_noise=1,
            drift=lambda x: np.polynomial.polynomial.polyval(np.asarray(x, float), bc),
            diffusion=lambda x: np.polynomial.polynomial.polyval(np.asarray(x, float), sc),
            recurrence_alpha=float(sec["recurrence_alpha"]),
            recurrence_gamma=float(sec["recurrence_gamma"]),
            recurrence_radius=float(sec["recurrence_radius"]),
            ellipticity_bounds=(max(min(probes[probes > 0], default=1.0) ** 2 * 0.01, 1e-6),
                                max(np.sum(probes), 1.0) ** 2 * 100.0),
            holder_nu=float(sec["holder_nu"]),
            drift_growth_alpha_bar=float(sec["alpha_bar"]),
            initial_state=np.array([float(sec.get("x0", 0.0))]),
            name="custom",
            support=(float(lo), math.inf) if lo is not None else (-math.inf, math.inf),
        )
    except Exception as exc:
        errors.append(f"[model] {exc}")
        return None


def validate(data: dict, pre_errors=()) -> RunConfig:
    """Cross-validate parsed sections and assemble a RunConfig.

    All detected problems are raised together; the schedule/regime
    consistency check quotes the violated inequality.
    """
    errors = list(pre_errors)

    def sec(name):
        return data.get(name, {})

    model = None
    msec = sec("model")
    family = str(msec.get("family", "")).lower()
    if not family:
        errors.append("[model] missing required key 'family'")
    elif family == "custom":
        model = _build_custom_model(msec, errors)
    else:
        params = {k: v for k, v in msec.items() if k != "family"}
        try:
            model = builtin_model(family, params)
        except KeyError as exc:
            errors.append(f"[model] family {family!r} missing parameter {exc}")
        except Exception as exc:
            errors.append(f"[model] {exc}")

    fsec = sec("functional")
    coeffs = fsec.get("coeffs")
    functional = None
    if coeffs is None:
        errors.append("[functional] missing required key 'coeffs'")
    else:
        try:
            functional = FunctionalSpec.from_polynomial(
                [float(c) for c in coeffs], name=str(fsec.get("name", "poly"))
            )
        except Exception as exc:
            errors.append(f"[functional] {exc}")

    ssec = sec("schedule")
    regime = str(ssec.get("regime", "")).upper()
    if regime not in _REGIMES:
        errors.append(f"[schedule] regime must be one of {_REGIMES}, got {regime!r}")
    theta = ssec.get("theta")
    if theta is None:
        errors.append("[schedule] missing required key 'theta'")
    gamma = ssec.get("gamma_mdp")
    policy = None
    if theta is not None:
        policy = SchedulePolicy(
            theta_step=float(theta),
            c_step=float(ssec.get("c_step", 1.0)),
            gamma_mdp=float(gamma) if gamma is not None else None,
        )

    esec = sec("experiment")
    kind = str(esec.get("kind", "")).upper()
    if kind not in _KINDS:
        errors.append(f"[experiment] kind must be one of {_KINDS}, got {kind!r}")
    eps_raw = esec.get("epsilon_list", [])
    eps = tuple(float(e) for e in eps_raw) if isinstance(eps_raw, list) else (float(eps_raw),)
    if not eps:
        errors.append("[experiment] epsilon_list must be nonempty")
    elif any(e <= 0 for e in eps):
        errors.append("[experiment] epsilon values must be positive")
    elif any(b >= a for a, b in zip(eps, eps[1:])):
        errors.append("[experiment] epsilon_list must be strictly decreasing")
    horizon = float(esec.get("horizon", 1.0))
    if horizon <= 0:
        errors.append("[experiment] horizon must be positive")
    replicates = int(esec.get("replicates", 2000))
    if replicates < 1:
        errors.append("[experiment] replicates must be >= 1")
    levels_raw = esec.get("levels", [])
    levels = tuple(float(x) for x in levels_raw) if isinstance(levels_raw, list) else (float(levels_raw),)
    if kind == "MDP_TAIL" and not levels:
        errors.append("[experiment] MDP_TAIL requires at least one level")

    # cross-field: the schedule must actually be valid for the model/regime
    if model is not None and policy is not None and regime in _REGIMES and eps:
        try:
            StepSchedule.from_policy(min(eps), regime, policy, model.holder_nu)
        except Exception as exc:
            errors.append(f"[schedule] {exc}")
    kind_regime = {"LLN_RATE": "LLN", "MDP_TAIL": "MDP"}
    expected = kind_regime.get(kind, "CLT")
    if kind in _KINDS and regime in _REGIMES and regime != expected:
        errors.append(
            f"[experiment] kind {kind} requires schedule regime {expected}, got {regime}"
        )

    osec = sec("output")
    rsec = sec("run")
    threads_raw = rsec.get("threads", "auto")
    threads = None if str(threads_raw).lower() == "auto" else int(threads_raw)
    if threads is not None and threads < 1:
        errors.append("[run] threads must be >= 1 or 'auto'")
    formats_raw = osec.get("formats", ["json", "csv"])
    formats = tuple(str(v) for v in (formats_raw if isinstance(formats_raw, list) else [formats_raw]))
    bad = [v for v in formats if v not in ("json", "csv")]
    if bad:
        errors.append(f"[output] unknown formats: {bad}")

    if errors:
        raise ConfigError(errors)
    return RunConfig(
        model=model,
        functional=functional,
        policy=policy,
        regime=regime,
        kind=kind,
        epsilon_list=eps,
        horizon=horizon,
        replicates=replicates,
        levels=levels,
        centralize=bool(fsec.get("centralize", True)),
        out_dir=str(osec.get("directory", "runs")),
        formats=formats,
        snapshots=bool(osec.get("snapshots", False)),
        seed=int(rsec.get("seed", 0)),
        threads=threads,
        raw=data,
    )


def parse_config(source: str, inline: bool = False) -> RunConfig:
    """Parse and validate a config file path (or inline text)."""
    if inline:
        text = source
    else:
        with open(source) as fh:
            text = fh.read()
    data, errors = _parse_sections(text)
    return validate(data, errors)
