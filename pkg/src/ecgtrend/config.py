"""Pipeline configuration (plain ``key=value`` files) and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ecgtrend import __version__
from ecgtrend.errors import ConfigError
from ecgtrend.inference import KERNELS, SizerConfig
from ecgtrend.ingest import DetectorConfig

__all__ = ["PipelineConfig", "RunManifest", "load_config", "file_digest"]


@dataclass
class PipelineConfig:
    """Every tunable of the pipeline; defaults follow the published analysis.

    Analysis: window ``m`` with the acme at ``acme_position = m/2``, 135
    spline breakpoints, local-fit bandwidth 20 beats on every 5th beat,
    alpha 0.05.  The ``sim_*`` keys only affect ``simulate``.
    """

    m: int = 1200
    acme_position: int = 600
    n_breakpoints: int = 135
    n_components: int = 2
    sizer_h: float = 20.0
    sizer_stride: int = 5
    sizer_kernel: str = "gaussian"
    alpha: float = 0.05
    reference: float = 1.0
    acme_smoothing: int = 0
    min_beats: int = 1500
    max_beats: int = 3000
    analyze_channels: str = "r,t"
    svg: bool = False

    clean_block: int = 30
    rr_low: float = 300.0
    rr_high: float = 2000.0
    derivative_threshold_factor: float = 2.0
    peak_fraction: float = 0.25
    refractory_ms: float = 200.0
    qrs_search_halfwidth_ms: float = 80.0
    max_invalid_fraction: float = 0.05

    seed: int = 0
    sim_subjects: int = 16
    sim_min_beats: int = 1500
    sim_max_beats: int = 3000
    sim_sigma: float = 0.05
    sim_rr_sigma: float = 0.005
    sim_u_sigma: float = 0.25
    sim_noise: str = "gaussian"
    sim_rr_rest: float = 800.0
    sim_rr_depth: float = 0.5
    sim_r_level: float = 2.0
    sim_t_level: float = 0.5
    sim_dip_amplitude: float = 0.05
    sim_dip_offset: float = 60.0
    sim_bump_amplitude: float = 0.08
    sim_bump_offset: float = 80.0
    sim_feature_width: float = 150.0
    sim_emit_ecg: bool = False
    sim_ecg_noise_pp: float = 0.008

    def validate(self):
        checks = [
            ("m", self.m >= 2 and self.m % 2 == 0, "must be an even count >= 2"),
            ("acme_position", self.acme_position == self.m // 2, "must equal m/2"),
            ("n_breakpoints", 5 <= self.n_breakpoints and self.n_breakpoints + 2 < self.m, "must lie in [5, m - 3)"),
            ("n_components", self.n_components >= 1, "must be >= 1"),
            ("sizer_h", self.sizer_h > 0, "must be positive"),
            ("sizer_stride", self.sizer_stride >= 1, "must be >= 1"),
            ("sizer_kernel", self.sizer_kernel in KERNELS, f"must be one of {sorted(KERNELS)}"),
            ("alpha", 0 < self.alpha < 1, "must lie in (0, 1)"),
            ("acme_smoothing", self.acme_smoothing >= 0, "must be >= 0"),
            ("min_beats", self.min_beats >= self.m, "must be >= m"),
            ("max_beats", self.max_beats >= self.min_beats, "must be >= min_beats"),
            ("analyze_channels", bool(self.channels) and set(self.channels) <= {"rr", "r", "t"}, "must list rr, r and/or t"),
            ("clean_block", self.clean_block >= 3, "must be >= 3"),
            ("rr_low", 0 < self.rr_low < self.rr_high, "must satisfy 0 < rr_low < rr_high"),
            ("derivative_threshold_factor", self.derivative_threshold_factor >= 0, "must be >= 0"),
            ("peak_fraction", 0 <= self.peak_fraction < 1, "must lie in [0, 1)"),
            ("refractory_ms", self.refractory_ms > 0, "must be positive"),
            ("qrs_search_halfwidth_ms", self.qrs_search_halfwidth_ms > 0, "must be positive"),
            ("max_invalid_fraction", 0 <= self.max_invalid_fraction <= 1, "must lie in [0, 1]"),
            ("sim_subjects", self.sim_subjects >= 1, "must be >= 1"),
            ("sim_min_beats", self.sim_min_beats >= self.m + 200, "must leave 100 beats of slack each side of the window"),
            ("sim_max_beats", self.sim_max_beats >= self.sim_min_beats, "must be >= sim_min_beats"),
            ("sim_sigma", self.sim_sigma >= 0, "must be >= 0"),
            ("sim_rr_sigma", self.sim_rr_sigma >= 0, "must be >= 0"),
            ("sim_u_sigma", self.sim_u_sigma >= 0, "must be >= 0"),
            ("sim_noise", self.sim_noise in ("gaussian", "student_t"), "must be gaussian or student_t"),
            ("sim_rr_depth", 0 < self.sim_rr_depth < 1, "must lie in (0, 1)"),
            ("sim_feature_width", self.sim_feature_width > 0, "must be positive"),
            ("sim_ecg_noise_pp", self.sim_ecg_noise_pp >= 0, "must be >= 0"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(key, f"{message} (got {getattr(self, key)!r})")
        return self

    @property
    def channels(self):
        return tuple(c.strip() for c in self.analyze_channels.split(",") if c.strip())

    def detector(self):
        return DetectorConfig(
            derivative_threshold_factor=self.derivative_threshold_factor,
            peak_fraction=self.peak_fraction,
            refractory=self.refractory_ms,
            qrs_search_halfwidth=self.qrs_search_halfwidth_ms,
            rr_normal_range=(self.rr_low, self.rr_high),
            clean_block=self.clean_block,
            max_invalid_fraction=self.max_invalid_fraction,
        )

    def sizer(self):
        return SizerConfig(bandwidth=self.sizer_h, stride=self.sizer_stride, kernel=self.sizer_kernel)

    def set(self, key, raw):
        """Assign ``key`` from its string form, converting to the field type."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(key, "unknown configuration key")
        kind = fields[key].type
        raw = raw.strip()
        try:
            if kind == "bool":
                if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                value = raw.lower() in ("1", "true", "yes")
            elif kind == "int":
                value = int(raw)
            elif kind == "float":
                value = float(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None
        setattr(self, key, value)

    def snapshot(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return "".join(f"{k}={v}\n" for k, v in self.snapshot().items())


def load_config(path=None, overrides=(), seed=None):
    """Defaults, then the ``key=value`` file, then ``--set`` overrides."""
    cfg = PipelineConfig()
    assigned = set()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc}") from None
        for line_no, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("config", f"{path}:{line_no}: expected key=value")
            key, raw = line.split("=", 1)
            cfg.set(key.strip(), raw)
            assigned.add(key.strip())
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg.set(key.strip(), raw)
        assigned.add(key.strip())
    if "acme_position" not in assigned:
        cfg.acme_position = cfg.m // 2
    if seed is not None:
        cfg.seed = int(seed)
    return cfg.validate()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """What a run consumed and produced, written next to its outputs."""

    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    subjects: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    tool_version: str = __version__

    def add_inputs(self, paths):
        for p in paths:
            self.inputs[str(p)] = file_digest(p)

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"
