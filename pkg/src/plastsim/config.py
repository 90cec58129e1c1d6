"""Run configuration: flat key=value files, CLI overrides, validation.

Every key below can appear in a config file (`key=value`, `#` comments);
unknown keys are rejected so typos fail loudly.  The run manifest written
next to the outputs uses the same format and can be fed back in as a
config file to reproduce a run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .neurons import NeuronParams


class ConfigError(ValueError):
    pass


@dataclass
class SimConfig:
    rank_count: int = 1
    neurons_per_rank: int = 32
    neurons_total: int = 0          # 0 -> rank_count * neurons_per_rank
    total_steps: int = 1000
    plasticity_interval: int = 100
    theta: float = 0.3
    sigma: float = 750.0
    delta: int = 100
    algorithm: str = "classic"      # classic | location_aware
    spike_mode: str = "exact"       # exact | frequency
    neuron_model: str = "poisson"   # poisson | izhikevich
    izhikevich_a: float = 0.02
    izhikevich_b: float = 0.2
    izhikevich_c: float = -65.0
    izhikevich_d: float = 8.0
    calcium_alpha: float = 1e-4
    target_calcium: float = 0.7
    growth_rate: float = 1e-3
    growth_curve: str = "linear"    # linear | gaussian
    growth_eta: float = 0.0
    background_mean: float = 5.0
    background_std: float = 1.0
    input_scale: float = 1.0 / 30.0
    synaptic_strength: float = 1.0
    min_initial_elements: float = 1.1
    max_initial_elements: float = 1.5
    inhibitory_fraction: float = 0.0
    allow_autapses: bool = False
    domain_x: float = 1000.0
    domain_y: float = 1000.0
    domain_z: float = 1000.0
    master_seed: int = 12345
    backend: str = "local"          # local | tcp
    tcp_hosts: str = ""             # host:port,host:port,... (one per rank)
    out_dir: str = ""
    metrics_every: int = 1
    calcium_every: int = 100
    record_spikes: bool = False
    per_target_draws: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        k = self.rank_count
        if k < 1 or k & (k - 1):
            raise ConfigError(f"rank_count must be a power of two, got {k}")
        if self.delta < 1:
            raise ConfigError("delta must be >= 1")
        if self.plasticity_interval < 1:
            raise ConfigError("plasticity_interval must be >= 1")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")
        if self.algorithm not in ("classic", "location_aware"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.spike_mode not in ("exact", "frequency"):
            raise ConfigError(f"unknown spike_mode {self.spike_mode!r}")
        if self.backend not in ("local", "tcp"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if not 0.0 <= self.inhibitory_fraction <= 1.0:
            raise ConfigError("inhibitory_fraction must lie in [0, 1]")
        if self.min_initial_elements > self.max_initial_elements:
            raise ConfigError("initial element range is inverted")
        if self.backend == "tcp" and not self.tcp_hosts:
            raise ConfigError("tcp backend requires tcp_hosts")

    @property
    def total_neurons(self) -> int:
        if self.neurons_total:
            return self.neurons_total
        return self.rank_count * self.neurons_per_rank

    def neuron_params(self) -> NeuronParams:
        return NeuronParams(
            model_kind=self.neuron_model,
            a=self.izhikevich_a, b=self.izhikevich_b,
            c=self.izhikevich_c, d=self.izhikevich_d,
            calcium_alpha=self.calcium_alpha,
            target_calcium=self.target_calcium,
            growth_rate=self.growth_rate,
            background_mean=self.background_mean,
            background_std=self.background_std,
            input_scale=self.input_scale,
            growth_curve=self.growth_curve,
            growth_eta=self.growth_eta,
        )

    def endpoints(self) -> list[tuple[str, int]]:
        out = []
        for part in self.tcp_hosts.split(","):
            part = part.strip()
            if not part:
                continue
            host, _, port = part.rpartition(":")
            out.append((host, int(port)))
        if len(out) != self.rank_count:
            raise ConfigError(
                f"tcp_hosts lists {len(out)} endpoints for "
                f"{self.rank_count} ranks")
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for {name}: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw.strip()


def parse_config_text(text: str, overrides: dict | None = None) -> SimConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown override {key!r}")
            values[key] = val
    return SimConfig(**values)


def load_config(path: str | Path, overrides: dict | None = None) -> SimConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, overrides)
