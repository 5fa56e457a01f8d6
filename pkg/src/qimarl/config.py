"""Experiment configuration: sectioned INI files, defaults, validation, echo.

Grammar: ``[section]`` headers followed by ``key = value`` lines; ``#`` and
``;`` start comments.  Lists are comma separated.  Sections: env, gp, qaoa,
marl, run, plus the optional experiment and sweep sections used by the
orchestration subcommands.  Every key not written in the file takes the
default listed on the dataclasses below.
"""

from __future__ import annotations

import configparser
import math
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

from . import ConfigError, ResourceCapError
from .field_env import FieldConfig
from .gp import KernelSpec
from .marl import QaoaIntegrationConfig, TrainConfig
from .qaoa import MAX_QUBITS

VARIANTS = ("qi_marl", "ppo_baseline", "icm", "rnd", "qi_icm")
ABLATIONS = ("no_qaoa", "no_gp", "no_entropy", "no_shared_memory")
SWEEP_PRESETS = {
    # the two grids quoted for the sensitivity study
    "kappa_appendix": {"marl.kappa": (0.5, 1.0, 2.0)},
    "sensitivity": {"marl.alpha": (0.1, 1.0, 10.0), "marl.beta": (0.1, 1.0, 10.0),
                    "marl.kappa": (0.1, 1.0, 10.0)},
}


@dataclass(frozen=True)
class GpSettings:
    spatial: str = "rbf"
    length_scale: float = 2.5
    variance: float = 1.0
    nu: float = 1.5
    temporal: str = "none"
    temporal_length_scale: float = 10.0
    period: float = 24.0
    noise_variance: float = 1e-3
    refit_every: int = 1
    memory_cap: int = 128
    use_gp: bool = True

    def __post_init__(self):
        self.kernel  # validates
        if self.refit_every < 1:
            raise ConfigError("refit_every must be >= 1")
        if self.memory_cap < 1:
            raise ConfigError("memory_cap must be >= 1")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.spatial, self.length_scale, self.variance, self.nu, self.temporal,
                          self.temporal_length_scale, self.period, self.noise_variance)


@dataclass(frozen=True)
class QaoaSettings:
    n: int = 9
    region_radius: int = 1
    mode: str = "statevector"  # "statevector" | "mapping"
    normalization: str = "softmax"
    p: int = 2
    gamma_w: float = 1.0
    tau: float = 0.1
    j_pen: float = 50.0
    d_min: float = 10.0
    shots: int = 200
    restarts: int = 8
    max_iters: int = 200
    kappa_map: Optional[float] = None  # None: follow marl.kappa
    refresh_every: int = 20
    refresh_iters: int = 30
    affine: bool = False

    def __post_init__(self):
        if self.mode not in ("statevector", "mapping"):
            raise ConfigError(f"qaoa mode must be statevector or mapping, got {self.mode!r}")
        if self.normalization not in ("softmax", "minmax"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.n < 1:
            raise ConfigError("qaoa n must be >= 1")
        if self.region_radius < 0:
            raise ConfigError("region_radius must be >= 0")
        if self.n > (2 * self.region_radius + 1) ** 2:
            raise ConfigError(f"qaoa n={self.n} exceeds the {(2 * self.region_radius + 1) ** 2} "
                              f"cells of a radius-{self.region_radius} region")
        if self.p < 1 or self.shots < 1 or self.restarts < 1 or self.max_iters < 1:
            raise ConfigError("p, shots, restarts and max_iters must be >= 1")
        if not (self.gamma_w > 0 and self.tau > 0):
            raise ConfigError("gamma_w and tau must be > 0")
        if self.j_pen < 0 or self.d_min < 0:
            raise ConfigError("j_pen and d_min must be >= 0")
        if self.kappa_map is not None and not (self.kappa_map >= 0 and math.isfinite(self.kappa_map)):
            raise ConfigError("kappa_map must be finite and >= 0")
        if self.refresh_every < 1 or self.refresh_iters < 1:
            raise ConfigError("refresh_every and refresh_iters must be >= 1")


@dataclass(frozen=True)
class MarlSettings:
    variant: str = "qi_marl"
    alpha: float = 1.0
    beta: float = 0.3
    kappa: float = 1.0
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    gamma: float = 0.99
    clip: float = 0.2
    entropy_coef: float = 0.01
    epochs: int = 10
    minibatch: int = 5
    hidden: tuple = (64, 64)
    eta: float = 0.3
    lambda_shape: float = 0.02
    lambda_kl: float = 0.0
    lambda_mix: float = 0.0
    mix_mode: str = "convex"
    gamma_q: float = 0.0
    anneal_steps: int = 0
    epsilon: float = 1e-6
    shared_memory: bool = True
    icm_eta: float = 0.05
    icm_lr: float = 1e-4
    rnd_beta: float = 0.1
    rnd_lr: float = 5e-5
    rnd_batch: int = 64
    curiosity_grad_clip: float = 0.5
    curiosity_latent: str = "auto"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not (self.alpha > 0 and self.beta >= 0):
            raise ConfigError("alpha must be > 0 and beta >= 0")
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            raise ConfigError("kappa must be finite and >= 0")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("hidden widths must be >= 1")
        if self.curiosity_latent != "auto" and not self.curiosity_latent.isdigit():
            raise ConfigError("curiosity_latent must be 'auto' or a positive integer")
        if self.icm_eta < 0 or self.rnd_beta < 0:
            raise ConfigError("curiosity scales must be >= 0")
        self.train_config
        self.requested_qaoa_config

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.actor_lr, self.critic_lr, self.gamma, self.clip, self.entropy_coef,
                           self.epochs, self.minibatch, tuple(self.hidden))

    @property
    def requested_qaoa_config(self) -> QaoaIntegrationConfig:
        return QaoaIntegrationConfig(self.eta, self.lambda_shape, self.lambda_kl, self.lambda_mix,
                                     self.mix_mode, self.gamma_q, self.anneal_steps, self.epsilon)

    @property
    def qaoa_config(self) -> QaoaIntegrationConfig:
        """Coefficients in force; variants without QAOA zero every one of them."""
        q = self.requested_qaoa_config
        if self.variant in ("qi_marl", "qi_icm"):
            return q
        return replace(q, eta=0.0, lambda_shape=0.0, lambda_kl=0.0, lambda_mix=0.0, gamma_q=0.0)

    @property
    def curiosity(self) -> Optional[str]:
        return {"icm": "icm", "qi_icm": "icm", "rnd": "rnd"}.get(self.variant)


@dataclass(frozen=True)
class RunSettings:
    episodes: int = 200
    agents: int = 3
    seeds: tuple = (0,)
    out: str = "runs"
    jobs: int = 1

    def __post_init__(self):
        if self.episodes < 1 or self.agents < 1 or self.jobs < 1:
            raise ConfigError("episodes, agents and jobs must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed")


@dataclass(frozen=True)
class ExperimentSettings:
    variants: tuple = VARIANTS
    ablations: tuple = ABLATIONS
    scale_agents: tuple = (3, 5, 10)
    scale_episodes: int = 3

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad or not self.variants:
            raise ConfigError(f"unknown variants {bad}; expected a subset of {VARIANTS}")
        bad = [v for v in self.ablations if v not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablations {bad}; expected a subset of {ABLATIONS}")
        if not self.scale_agents or any(n < 1 for n in self.scale_agents):
            raise ConfigError("scale_agents must list positive agent counts")
        if self.scale_episodes < 1:
            raise ConfigError("scale_episodes must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    env: FieldConfig = field(default_factory=FieldConfig)
    gp: GpSettings = field(default_factory=GpSettings)
    qaoa: QaoaSettings = field(default_factory=QaoaSettings)
    marl: MarlSettings = field(default_factory=MarlSettings)
    run: RunSettings = field(default_factory=RunSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    sweep: tuple = ()  # ((path, (values...)), ...)

    @property
    def kappa_map(self) -> float:
        return self.marl.kappa if self.qaoa.kappa_map is None else self.qaoa.kappa_map


SECTIONS = {"env": FieldConfig, "gp": GpSettings, "qaoa": QaoaSettings, "marl": MarlSettings,
            "run": RunSettings, "experiment": ExperimentSettings}


# ---------------------------------------------------------------- value coercion

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(default: Any, text: str, name: str):
    text = text.strip()
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float) or (default is None and name == "kappa_map"):
        if default is None and text.lower() in ("", "none"):
            return None
        return float(text)
    if isinstance(default, tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        if default and isinstance(default[0], str):
            return tuple(items)
        return tuple(int(s) for s in items)
    return text


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


# ---------------------------------------------------------------- resolution

def _locate(lines: Optional[dict], section: str, key: Optional[str] = None) -> str:
    if not lines:
        return ""
    n = lines.get((section, key)) if key else None
    n = n or lines.get((section, None))
    return f"line {n}: " if n else ""


def resolve_defaults(partial: Optional[dict] = None, lines: Optional[dict] = None) -> ExperimentConfig:
    """Fill unset keys from the built-in defaults and validate everything.

    ``partial`` maps section -> {key: value}; values may be strings (parsed by
    the key's type) or already-typed.  ``lines`` maps (section, key) to the
    source line for error messages.
    """
    partial = partial or {}
    built: dict[str, Any] = {}
    for section in partial:
        if section not in SECTIONS and section != "sweep":
            raise ConfigError(f"{_locate(lines, section)}unknown section [{section}]; expected one "
                              f"of {sorted([*SECTIONS, 'sweep'])}")
    for section, cls in SECTIONS.items():
        given = partial.get(section, {})
        defaults = {f.name: f.default for f in fields(cls)}
        kwargs = {}
        for key, raw in given.items():
            if key not in defaults:
                raise ConfigError(f"{_locate(lines, section, key)}unknown key '{key}' in "
                                  f"[{section}]; valid keys: {', '.join(defaults)}")
            try:
                kwargs[key] = _coerce(defaults[key], raw, key) if isinstance(raw, str) else raw
            except ValueError as exc:
                raise ConfigError(f"{_locate(lines, section, key)}[{section}] {key}: {exc}") from None
        try:
            built[section] = cls(**kwargs)
        except ConfigError as exc:
            key = next((k for k in given if re.search(rf"\b{re.escape(k)}\b", str(exc))), None)
            raise ConfigError(f"{_locate(lines, section, key)}[{section}] {exc}") from None
    sweep = _resolve_sweep(partial.get("sweep", {}), lines)
    cfg = ExperimentConfig(**built, sweep=sweep)
    if cfg.qaoa.mode == "statevector" and cfg.qaoa.n > MAX_QUBITS:
        raise ResourceCapError(
            f"{_locate(lines, 'qaoa', 'n')}qaoa n={cfg.qaoa.n} exceeds the {MAX_QUBITS}-qubit "
            f"statevector cap; lower n or set mode = mapping")
    return cfg


def _resolve_sweep(section: dict, lines) -> tuple:
    grid: dict[str, tuple] = {}
    for key, raw in section.items():
        if key == "preset":
            name = str(raw).strip()
            if name not in SWEEP_PRESETS:
                raise ConfigError(f"{_locate(lines, 'sweep', key)}unknown sweep preset {name!r}; "
                                  f"expected one of {sorted(SWEEP_PRESETS)}")
            grid.update(SWEEP_PRESETS[name])
    for key, raw in section.items():
        if key == "preset":
            continue
        sec, _, name = key.partition(".")
        cls = SECTIONS.get(sec)
        valid = {f.name: f.default for f in fields(cls)} if cls else {}
        default = valid.get(name)
        if not isinstance(default, (int, float)) or isinstance(default, bool):
            if not (sec == "qaoa" and name == "kappa_map"):
                raise ConfigError(f"{_locate(lines, 'sweep', key)}sweep path '{key}' is not a "
                                  f"numeric config key")
        try:
            vals = raw if not isinstance(raw, str) else tuple(
                float(s) for s in raw.split(",") if s.strip())
        except ValueError as exc:
            raise ConfigError(f"{_locate(lines, 'sweep', key)}sweep {key}: {exc}") from None
        if isinstance(default, int) and not isinstance(default, bool):
            vals = tuple(int(v) for v in vals)
        if not vals:
            raise ConfigError(f"{_locate(lines, 'sweep', key)}sweep {key} has no values")
        grid[key] = tuple(vals)
    return tuple(grid.items())


def parse_ini(text: str) -> tuple[dict, dict]:
    """Raw section -> {key: string} plus a (section, key) -> line-number map."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       strict=True, default_section="\x00defaults")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = f"line {lineno}: " if lineno else ""
        raise ConfigError(f"{where}{exc.message if hasattr(exc, 'message') else exc}") from None
    lines: dict = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = n
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip()), n)
    raw = {sec: dict(parser.items(sec)) for sec in parser.sections()}
    return raw, lines


def loads(text: str) -> ExperimentConfig:
    raw, lines = parse_ini(text)
    return resolve_defaults(raw, lines)


def load(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    try:
        return loads(text)
    except ConfigError as exc:
        raise type(exc)(f"{p}: {exc}") from None


def dumps(cfg: ExperimentConfig) -> str:
    """Every key with its resolved value; loads(dumps(cfg)) == cfg."""
    out = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        out.append(f"[{section}]")
        for f in fields(obj):
            out.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        out.append("")
    if cfg.sweep:
        out.append("[sweep]")
        for key, vals in cfg.sweep:
            out.append(f"{key} = {_format(tuple(vals))}")
        out.append("")
    return "\n".join(out)


def with_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    """Return a re-validated copy with dotted-path keys replaced."""
    sections: dict[str, dict] = {}
    for path, value in overrides.items():
        sec, _, key = path.partition(".")
        sections.setdefault(sec, {})[key] = value
    partial = {}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        vals = {f.name: getattr(obj, f.name) for f in fields(obj)}
        for key, value in sections.pop(sec, {}).items():
            if key not in vals:
                raise ConfigError(f"unknown key '{key}' in [{sec}]")
            vals[key] = value
        partial[sec] = vals
    if sections:
        raise ConfigError(f"unknown sections {sorted(sections)}")
    partial["sweep"] = {k: v for k, v in cfg.sweep}
    return resolve_defaults(partial)
