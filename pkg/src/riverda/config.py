"""Experiment configuration: nested dataclasses loaded from YAML.

Keys carry their units (``window_s``, ``length_m``).  Unknown keys and
missing required keys are rejected with the offending key path; every
default is materialized so that the parsed config can be echoed and parsed
back to an equal object.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .control import ConfigurationError
from .enkf import EXPERIMENTS

DAY = 86400.0
REQUIRED = object()


@dataclass
class GeometryConfig:
    length_m: float = 50_000.0
    cell_count: int = 250
    upstream_bed_m: float = 20.0
    slope: float = 4e-4
    main_width_m: float = 100.0
    bank_height_m: float = 4.0
    bank_amplitude_m: float = 0.5
    bank_wavelength_m: float = 10_000.0
    floodplain_width_m: float = 1500.0
    zone_edges_m: list = field(default_factory=lambda: [0.0, 7500.0, 16000.0, 20000.0,
                                                        30000.0, 42500.0, 50000.0])
    dt_s: float = 16.0

    def validate(self, path):
        _positive(self, path, "length_m", "main_width_m", "bank_height_m", "dt_s", "slope")
        if self.cell_count < 3:
            raise ConfigurationError(f"{path}.cell_count: must be >= 3")
        if self.floodplain_width_m < 0:
            raise ConfigurationError(f"{path}.floodplain_width_m: must be >= 0")
        e = self.zone_edges_m
        if len(e) < 2 or e[0] != 0 or abs(e[-1] - self.length_m) > 1e-9 or \
                any(b <= a for a, b in zip(e[:-1], e[1:])):
            raise ConfigurationError(
                f"{path}.zone_edges_m: must increase strictly from 0 to length_m")


@dataclass
class ForcingConfig:
    """Gamma-shaped synthetic hydrograph unless ``hydrograph_csv`` is given."""

    hydrograph_csv: str | None = None
    base_discharge_m3s: float = 300.0
    peak_discharge_m3s: float = 1200.0
    peak_time_s: float = 8 * DAY
    shape: float = 4.0
    hydrograph_step_s: float = 3600.0
    rating_csv: str | None = None
    rating_max_discharge_m3s: float = 3000.0
    rating_ks: float = 40.0
    spinup_s: float = DAY

    def validate(self, path):
        _positive(self, path, "base_discharge_m3s", "peak_time_s", "shape",
                  "hydrograph_step_s", "rating_max_discharge_m3s", "rating_ks")
        if self.peak_discharge_m3s < self.base_discharge_m3s:
            raise ConfigurationError(f"{path}.peak_discharge_m3s: below base discharge")
        if self.spinup_s < 0:
            raise ConfigurationError(f"{path}.spinup_s: must be >= 0")


@dataclass
class StationConfig:
    id: str = REQUIRED
    x_m: float = REQUIRED
    role: str = "assimilation"
    sampling_interval_s: float = 900.0
    datum_m: float | None = None

    def validate(self, path):
        if self.role not in ("assimilation", "validation"):
            raise ConfigurationError(f"{path}.role: must be assimilation or validation")
        _positive(self, path, "sampling_interval_s")


@dataclass
class PassConfig:
    pass_id: int = REQUIRED
    x_lo_m: float = REQUIRED
    x_hi_m: float = REQUIRED
    overpass_times_s: list = field(default_factory=list)

    def validate(self, path):
        if not self.x_lo_m < self.x_hi_m:
            raise ConfigurationError(f"{path}: x_lo_m must be < x_hi_m")


@dataclass
class PassPlanConfig:
    kind: str = "tripled"
    interval_s: float | None = None
    offset_s: float | None = None
    full_coverage: bool = True
    passes: list = field(default_factory=lambda: [
        PassConfig(42, 0.0, 50_000.0, [2 * DAY]),
        PassConfig(113, 0.0, 50_000.0, [9 * DAY]),
        PassConfig(391, 0.0, 50_000.0, [16 * DAY]),
    ])

    def validate(self, path):
        if self.kind not in ("nominal21d", "tripled", "fixed_interval"):
            raise ConfigurationError(f"{path}.kind: unknown pass plan {self.kind!r}")
        if self.kind == "fixed_interval" and (self.interval_s is None or self.interval_s <= 0):
            raise ConfigurationError(f"{path}.interval_s: must be > 0 for fixed_interval")
        if not self.passes:
            raise ConfigurationError(f"{path}.passes: at least one pass is required")


@dataclass
class ComponentConfig:
    default: float = REQUIRED
    sd: float = REQUIRED
    lower: float = REQUIRED
    upper: float = REQUIRED

    def validate(self, path):
        if self.lower > self.upper:
            raise ConfigurationError(f"{path}: lower > upper")
        if self.sd < 0:
            raise ConfigurationError(f"{path}.sd: must be >= 0")


@dataclass
class PriorConfig:
    floodplain_controlled: bool = True
    riverbed_ks: ComponentConfig = field(default_factory=lambda: ComponentConfig(40.0, 5.0,
                                                                                 10.0, 80.0))
    floodplain_ks: ComponentConfig = field(default_factory=lambda: ComponentConfig(10.0, 3.0,
                                                                                   2.0, 40.0))
    mu: ComponentConfig = field(default_factory=lambda: ComponentConfig(1.0, 0.1, 0.5, 1.5))


@dataclass
class EnkfConfig:
    members: int = 50
    window_s: float = 6 * 3600.0
    inflation: float = 1.0
    save_every_s: float = 900.0
    tau: float = 0.15
    gauge_sigma_floor_m: float = 0.02
    node_sigma_floor_m: float = 0.10
    center_perturbations: bool = True
    reperturbation: float = 0.3

    def validate(self, path):
        if not 0.0 <= self.reperturbation <= 1.0:
            raise ConfigurationError(f"{path}.reperturbation: must lie in [0, 1]")
        if self.members < 2:
            raise ConfigurationError(f"{path}.members: ensemble size must be >= 2")
        _positive(self, path, "window_s", "save_every_s", "inflation", "gauge_sigma_floor_m",
                  "node_sigma_floor_m")
        if self.tau < 0:
            raise ConfigurationError(f"{path}.tau: must be >= 0")


@dataclass
class TruthConfig:
    """True control; ``mu_values`` over ``mu_times_s`` make the multiplier time-varying."""

    riverbed_ks: list = field(default_factory=lambda: [48.0, 34.0, 45.0, 33.0, 46.0, 35.0])
    floodplain_ks: float = 10.0
    mu: float = 1.0
    mu_times_s: list = field(default_factory=list)
    mu_values: list = field(default_factory=list)
    flood_peak_time_s: float | None = None
    extent_snapshot_times_s: list = field(default_factory=list)

    def validate(self, path):
        if len(self.mu_times_s) != len(self.mu_values):
            raise ConfigurationError(f"{path}: mu_times_s and mu_values differ in length")


@dataclass
class SynthesisConfig:
    gauge_sigma_m: float = 0.02
    pixel_sigma_m: float = 1.0
    pixel_density: int = 100
    dark_fraction: float = 0.0

    def validate(self, path):
        if self.gauge_sigma_m < 0 or self.pixel_sigma_m < 0:
            raise ConfigurationError(f"{path}: noise levels must be >= 0")
        if self.pixel_density < 1:
            raise ConfigurationError(f"{path}.pixel_density: must be >= 1")
        if not 0 <= self.dark_fraction <= 1:
            raise ConfigurationError(f"{path}.dark_fraction: must be in [0, 1]")


@dataclass
class ObservationFilesConfig:
    gauges_csv: str | None = None
    nodes_csv: str | None = None


@dataclass
class ExperimentConfig:
    seed: int = REQUIRED
    experiments: list = REQUIRED
    name: str = "experiment"
    mode: str = "osse"
    event_start_s: float = 0.0
    event_end_s: float = 16 * DAY
    revisit_sweep_h: list = field(default_factory=list)
    output_dir: str = "out"
    extent_threshold_m: float = 0.0
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    forcing: ForcingConfig = field(default_factory=ForcingConfig)
    stations: list = field(default_factory=list)
    pass_plan: PassPlanConfig = field(default_factory=PassPlanConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    enkf: EnkfConfig = field(default_factory=EnkfConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    synthesis: SynthesisConfig = field(default_factory=SynthesisConfig)
    observations: ObservationFilesConfig = field(default_factory=ObservationFilesConfig)

    def validate(self, path="config"):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigurationError(f"{path}.seed: must be an explicit integer")
        if not self.experiments:
            raise ConfigurationError(f"{path}.experiments: must be nonempty")
        bad = [e for e in self.experiments if e not in EXPERIMENTS]
        if bad:
            raise ConfigurationError(f"{path}.experiments: unknown experiment(s) {bad}")
        if len(set(self.experiments)) != len(self.experiments):
            raise ConfigurationError(f"{path}.experiments: duplicates")
        if self.mode not in ("osse", "real"):
            raise ConfigurationError(f"{path}.mode: must be osse or real")
        if not self.event_end_s > self.event_start_s:
            raise ConfigurationError(f"{path}.event_end_s: must exceed event_start_s")
        if any(h <= 0 for h in self.revisit_sweep_h):
            raise ConfigurationError(f"{path}.revisit_sweep_h: intervals must be > 0")
        ids = [s.id for s in self.stations]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"{path}.stations: duplicate station ids")
        for s in self.stations:
            if not 0 <= s.x_m <= self.geometry.length_m:
                raise ConfigurationError(f"{path}.stations.{s.id}.x_m: outside the reach")
        zones = len(self.geometry.zone_edges_m) - 1
        if self.mode == "osse" and len(self.truth.riverbed_ks) != zones:
            raise ConfigurationError(
                f"{path}.truth.riverbed_ks: {len(self.truth.riverbed_ks)} values for {zones} zones")
        for t in self.truth.extent_snapshot_times_s:
            if not self.event_start_s <= t <= self.event_end_s:
                raise ConfigurationError(
                    f"{path}.truth.extent_snapshot_times_s: {t} outside the event window")
        if self.mode == "real" and not (self.observations.gauges_csv
                                        or self.observations.nodes_csv):
            raise ConfigurationError(f"{path}.observations: real mode needs observation files")

    @property
    def zone_count(self) -> int:
        return len(self.geometry.zone_edges_m) - 1

    def sweep_labels(self) -> list:
        return [f"SWDA_{_hours(h)}h" for h in self.revisit_sweep_h]


def _hours(h) -> str:
    return f"{h:g}"


def _positive(obj, path, *names):
    for n in names:
        if not getattr(obj, n) > 0:
            raise ConfigurationError(f"{path}.{n}: must be > 0")


# ---------------------------------------------------------------------------
# loading


def _hint(cls, name):
    return typing.get_type_hints(cls)[name]


def _list_item_type(cls, name):
    return {
        (ExperimentConfig, "stations"): StationConfig,
        (PassPlanConfig, "passes"): PassConfig,
    }.get((cls, name))


def _coerce(value, hint, path):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    if hint is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return [float(v) if isinstance(v, int) and not isinstance(v, bool) else v
                for v in value]
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}"
        if f.name not in data:
            if f.default is REQUIRED:
                raise ConfigurationError(f"{sub}: missing required key")
            continue
        value = data[f.name]
        hint = _hint(cls, f.name)
        item = _list_item_type(cls, f.name)
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _build(hint, value, sub)
        elif item is not None:
            if not isinstance(value, list):
                raise ConfigurationError(f"{sub}: expected a list")
            kwargs[f.name] = [_build(item, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        elif f.name == "experiments":
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigurationError(f"{sub}: expected a list of experiment ids")
            kwargs[f.name] = list(value)
        else:
            kwargs[f.name] = _coerce(value, hint, sub)
    obj = cls(**kwargs)
    if hasattr(obj, "validate") and cls is not ExperimentConfig:
        obj.validate(path)
    return obj


def default_station_configs(geometry: GeometryConfig) -> list:
    names = ["TON", "LMA", "MD0", "MD1", "COU", "LR1", "LR0"]
    fractions = [0.02, 0.25, 0.45, 0.50, 0.70, 0.93, 0.97]
    roles = ["assimilation", "assimilation", "assimilation", "validation", "assimilation",
             "validation", "assimilation"]
    intervals = [900.0, 3600.0, 900.0, 3600.0, 3600.0, 3600.0, 900.0]
    return [StationConfig(n, f * geometry.length_m, r, dt)
            for n, f, r, dt in zip(names, fractions, roles, intervals)]


def config_from_dict(data: dict, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Build and validate a config; relative file paths resolve against ``base_dir``."""
    if data is None:
        raise ConfigurationError("config: empty document")
    cfg = _build(ExperimentConfig, data, "config")
    if not cfg.stations:
        cfg.stations = default_station_configs(cfg.geometry)
    if base_dir is not None:
        base = Path(base_dir)
        for obj, attr in ((cfg.forcing, "hydrograph_csv"), (cfg.forcing, "rating_csv"),
                          (cfg.observations, "gauges_csv"), (cfg.observations, "nodes_csv")):
            v = getattr(obj, attr)
            if v is not None and not os.path.isabs(v):
                setattr(obj, attr, str((base / v).resolve()))
    cfg.validate()
    for obj, attr in ((cfg.forcing, "hydrograph_csv"), (cfg.forcing, "rating_csv"),
                      (cfg.observations, "gauges_csv"), (cfg.observations, "nodes_csv")):
        v = getattr(obj, attr)
        if v is not None and not Path(v).is_file():
            raise ConfigurationError(f"config: referenced file not found: {v}")
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigurationError(f"cannot read config {path}: {err}") from err
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigurationError(f"invalid YAML in {path}: {err}") from err
    return config_from_dict(data, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
