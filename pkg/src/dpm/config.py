"""Experiment configuration: strict INI files mapped onto typed sections.

Every key must belong to a known section; unknown sections or keys are
rejected with an error naming them. Missing keys take the defaults below.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


@dataclass
class ExperimentSection:
    name: str = "desk"
    output_dir: str = "dpm_run"


@dataclass
class GridSection:
    dns_n: int = 64
    domain_length: float = 2.0 * math.pi


@dataclass
class PhysicsSection:
    mu0: float = 0.01
    density: float = 1.0
    urms0: float = 1.0
    peak_wavenumber: float = 6.0


@dataclass
class CasesSection:
    train: list = field(default_factory=lambda: [0.5, 1.0, 2.0])
    test: list = field(default_factory=lambda: [0.75, 1.25, 1.5])
    seed_base: int = 1000
    heldout: float = 1.5


@dataclass
class DnsSection:
    cfl: float = 0.4
    initial_decay: float = 0.05
    duration: float = 2.0


@dataclass
class FilterSection:
    ratio: int = 4


@dataclass
class LesSection:
    dns_steps_per_les_step: int = 4
    blowup_factor: float = 1000.0
    smagorinsky_cs: float = 0.18


@dataclass
class ModelSection:
    hidden: int = 25
    derivative_set: str = "full_hessian"
    output_mode: str = "paper_k18"
    output_scale: str = "auto"
    init_seed: int = 7


@dataclass
class TrainingSection:
    mode: str = "adjoint"
    divergence_free: bool = True
    iterations: int = 2000
    window_steps: int = 5
    learning_rate: float = 1e-3
    lr_decay_iterations: float = 1000.0
    rmsprop_rho: float = 0.9
    rmsprop_eps: float = 1e-8
    compare: str = "end"
    checkpoint_every: int = 500
    seed: int = 11
    apriori_iterations: int = 2000


@dataclass
class EvaluationSection:
    closures: list = field(default_factory=lambda: ["no_model", "smagorinsky", "dynamic_smagorinsky", "dpm"])
    spectrum_every: int = 10


_SECTIONS = {
    "experiment": ExperimentSection,
    "grid": GridSection,
    "physics": PhysicsSection,
    "cases": CasesSection,
    "dns": DnsSection,
    "filter": FilterSection,
    "les": LesSection,
    "model": ModelSection,
    "training": TrainingSection,
    "evaluation": EvaluationSection,
}

# entries that locate outputs but do not affect any computed value
_UNHASHED = {("experiment", "output_dir")}
# sections that determine the DNS and filtered data
DATA_SECTIONS = ("grid", "physics", "cases", "dns", "filter", "les")


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    grid: GridSection = field(default_factory=GridSection)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    cases: CasesSection = field(default_factory=CasesSection)
    dns: DnsSection = field(default_factory=DnsSection)
    filter: FilterSection = field(default_factory=FilterSection)
    les: LesSection = field(default_factory=LesSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        g, f = self.grid, self.filter
        if g.dns_n < 4:
            raise ConfigError("grid.dns_n must be at least 4")
        if f.ratio < 1 or g.dns_n % f.ratio or g.dns_n // f.ratio < 4:
            raise ConfigError(f"filter.ratio={f.ratio} must divide grid.dns_n={g.dns_n} leaving >= 4 cells")
        for name in ("mu0", "density", "urms0", "peak_wavenumber"):
            if not getattr(self.physics, name) > 0:
                raise ConfigError(f"physics.{name} must be positive")
        ratios = list(self.cases.train) + list(self.cases.test)
        if not self.cases.train:
            raise ConfigError("cases.train must list at least one viscosity ratio")
        if any(not r > 0 for r in ratios):
            raise ConfigError("case viscosity ratios must be positive")
        if len(set(ratios)) != len(ratios):
            raise ConfigError("case viscosity ratios must be distinct")
        if self.cases.heldout not in self.cases.test:
            raise ConfigError("cases.heldout must be one of cases.test")
        if not 0 < self.dns.cfl <= 1:
            raise ConfigError("dns.cfl must lie in (0, 1]")
        if self.dns.initial_decay < 0 or not self.dns.duration > 0:
            raise ConfigError("dns.initial_decay must be >= 0 and dns.duration > 0")
        if self.les.dns_steps_per_les_step < 1:
            raise ConfigError("les.dns_steps_per_les_step must be >= 1")
        t = self.training
        if t.mode not in ("adjoint", "apriori"):
            raise ConfigError(f"training.mode must be adjoint or apriori, got {t.mode!r}")
        if t.compare not in ("end", "every"):
            raise ConfigError("training.compare must be end or every")
        if t.window_steps < 1 or t.iterations < 0 or t.apriori_iterations < 0:
            raise ConfigError("training.window_steps must be >= 1 and iteration counts >= 0")
        if not t.learning_rate >= 0 or not t.lr_decay_iterations > 0:
            raise ConfigError("training.learning_rate must be >= 0 and lr_decay_iterations > 0")
        m = self.model
        if m.hidden < 1:
            raise ConfigError("model.hidden must be >= 1")
        if m.derivative_set not in ("paper_text", "full_hessian"):
            raise ConfigError(f"unknown model.derivative_set {m.derivative_set!r}")
        if m.output_mode not in ("direct_forcing", "tensor_divergence", "paper_k18"):
            raise ConfigError(f"unknown model.output_mode {m.output_mode!r}")
        if m.output_scale != "auto":
            try:
                if not float(m.output_scale) > 0:
                    raise ValueError
            except ValueError:
                raise ConfigError("model.output_scale must be 'auto' or a positive number") from None
        known = {"no_model", "smagorinsky", "dynamic_smagorinsky", "dpm", "dpm_apriori", "dpm_nodiv"}
        for c in self.evaluation.closures:
            if c not in known:
                raise ConfigError(f"unknown closure {c!r} in evaluation.closures")

    @property
    def les_n(self) -> int:
        return self.grid.dns_n // self.filter.ratio

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self, sections=None) -> str:
        """Short digest of the configuration (optionally of selected sections only)."""
        d = self.to_dict()
        for sec, key in _UNHASHED:
            d[sec].pop(key, None)
        if sections is not None:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def data_hash(self) -> str:
        return self.config_hash(DATA_SECTIONS)

    def to_ini(self) -> str:
        lines = []
        for sec, values in self.to_dict().items():
            lines.append(f"[{sec}]")
            for k, v in values.items():
                if isinstance(v, list):
                    v = ", ".join(str(x) for x in v)
                elif isinstance(v, bool):
                    v = "on" if v else "off"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _convert(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], float):
                return [float(x) for x in items]
            return items
        return raw.strip()
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {where}") from None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    sections = {}
    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        cls = _SECTIONS[sec]
        defaults = cls()
        names = {f.name for f in fields(cls)}
        values = {}
        for key, raw in parser.items(sec):
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            values[key] = _convert(sec, key, raw, getattr(defaults, key))
        sections[sec] = cls(**values)
    return ExperimentConfig(**sections)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())
