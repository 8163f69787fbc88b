"""Run configuration: defaults, TOML loading, validation and a stable hash."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Mapping, Optional

import tomli

from . import changepoint, diagnosis, timeline

CONFIG_ENV = "FLOWSCOPE_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    window_sec: Optional[float] = None
    bocd_threshold: float = changepoint.DEFAULT_THRESHOLD
    bocd_hazard: float = changepoint.DEFAULT_HAZARD
    bocd_noise_scale: float = changepoint.DEFAULT_NOISE_SCALE
    k_sigma: float = diagnosis.DEFAULT_K
    sigma_estimator: str = "mad"
    dp_limit: int = diagnosis.DEFAULT_DP_LIMIT
    bucket_us: int = diagnosis.DEFAULT_BUCKET_US
    min_rel_deviation: float = diagnosis.DEFAULT_MIN_REL_DEVIATION
    gap_min_us: int = timeline.DEFAULT_GAP_MIN_US
    align_tolerance: float = timeline.ALIGN_TOLERANCE
    size_bucket_bytes: int = 1
    refine: bool = True
    seed: int = 0

    def __post_init__(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.window_sec is None or self.window_sec > 0, "window_sec must be > 0")
        need(0.0 < self.bocd_threshold < 1.0, "bocd_threshold must lie in (0, 1)")
        need(0.0 < self.bocd_hazard < 1.0, "bocd_hazard must lie in (0, 1)")
        need(self.bocd_noise_scale > 0, "bocd_noise_scale must be > 0")
        need(self.k_sigma > 0, "k_sigma must be > 0")
        need(self.sigma_estimator in ("mad", "std"), "sigma_estimator must be 'mad' or 'std'")
        need(self.dp_limit >= 1, "dp_limit must be >= 1")
        need(self.bucket_us >= 1, "bucket_us must be >= 1")
        need(0.0 <= self.min_rel_deviation < 1.0, "min_rel_deviation must lie in [0, 1)")
        need(self.gap_min_us >= 0, "gap_min_us must be >= 0")
        need(0.0 < self.align_tolerance < 1.0, "align_tolerance must lie in (0, 1)")
        need(self.size_bucket_bytes >= 1, "size_bucket_bytes must be >= 1")

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any]) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values = {}
        for key, value in obj.items():
            default = getattr(cls, key)
            is_number = isinstance(value, (int, float)) and not isinstance(value, bool)
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, str):
                ok = isinstance(value, str)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            else:
                ok = is_number
                value = float(value) if ok else value
            if not ok:
                raise ConfigError(f"{key}: unexpected value {value!r}")
            values[key] = value
        return cls(**values)

    def with_overrides(self, **overrides) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_json(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of the analysis settings (sha256 of canonical JSON)."""
        text = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    @property
    def step_params(self):
        from .parallelism import StepParams

        return StepParams(self.bocd_threshold, self.bocd_hazard, self.bocd_noise_scale)

    @property
    def diagnosis_params(self) -> diagnosis.DiagnosisParams:
        return diagnosis.DiagnosisParams(
            k=self.k_sigma,
            estimator=diagnosis.SigmaEstimator(self.sigma_estimator),
            dp_limit=self.dp_limit,
            bucket_us=self.bucket_us,
            min_rel_deviation=self.min_rel_deviation,
        )


def load_config(path: Optional[str] = None) -> RunConfig:
    """Load ``path``, else the file named by FLOWSCOPE_CONFIG, else defaults.

    The TOML file may hold the keys at top level or under a ``[flowscope]`` table.
    """
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as handle:
            data = tomli.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc
    if "flowscope" in data:
        if set(data) != {"flowscope"}:
            raise ConfigError("config keys must all live under [flowscope] or all at top level")
        data = data["flowscope"]
    return RunConfig.from_mapping(data)
