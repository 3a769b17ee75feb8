"""Pipeline configuration: an INI file with sections, overridable by
environment variables and command-line flags.

Precedence (highest wins): flags > VOICEFACE__SECTION__KEY environment
variables > config file > built-in defaults.  The config hash covers the
effective (merged) values, so any override changes the hash.
"""

from __future__ import annotations

import configparser
import hashlib
import os

ENV_PREFIX = "VOICEFACE__"

DEFAULTS: dict[str, dict[str, str]] = {
    "paths": {
        "dataset_root": "dataset",
        "output_dir": "out",
    },
    "synth": {
        "n_speakers": "400",
        "n_vertices": "500",
        "latent_dim": "24",
        "planted": "nose_width,mouth_width,nose_height,jaw_width",
        "signal_strength": "0.9",
        "quality_low": "0.5",
        "quality_high": "2.0",
        "noise_rec": "1.0",
        "noise_frame": "1.0",
        "n_frames": "60",
        "frame_hop": "0.25",
        "wave_periods": "8",
        "write_phonemes": "false",
        "phoneme_labels": "aa,iy,b",
        "phoneme_span_frames": "20",
    },
    "features": {
        "sample_rate": "16000",
    },
    "training": {
        "iterations": "5000",
        "batch_size": "64",
        "learning_rate": "0.1",
        "momentum": "0.9",
        "weight_decay": "0.0005",
        "max_grad_norm": "5.0",
        "warmup_iterations": "200",
        "segment_lo_frames": "600",
        "segment_hi_frames": "800",
        "eval_every": "0",
        "n_eval_segments": "1",
        "phonatory": "false",
        "gamma": "0.1",
        "window_stride": "1",
        "pretrain_iterations": "0",
    },
    "harness": {
        "n_runs": "100",
        "alpha": "0.05",
        "filter_levels": "1.0,0.75,0.5",
        "iterations": "50",
        "batch_size": "16",
        "warmup_iterations": "12",
        "eval_every": "25",
        "phoneme_runs": "0",
    },
    "reconstruction": {
        "lambda": "1e-3",
        "top_ams": "10",
        "basis_dim": "0",
        "max_iterations": "500",
    },
    "pipeline": {
        "seed": "0",
        "jobs": "1",
    },
}


class PipelineConfig:
    """Merged configuration with typed getters and a content hash."""

    def __init__(self, values: dict[str, dict[str, str]]):
        self._values = values

    @property
    def hash(self) -> str:
        payload = "\n".join(
            f"{section}.{key}={self._values[section][key]}"
            for section in sorted(self._values)
            for key in sorted(self._values[section])
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def get(self, section: str, key: str) -> str:
        try:
            return self._values[section][key]
        except KeyError:
            raise KeyError(f"no config value [{section}] {key}") from None

    def get_int(self, section: str, key: str) -> int:
        return int(self.get(section, key))

    def get_float(self, section: str, key: str) -> float:
        return float(self.get(section, key))

    def get_bool(self, section: str, key: str) -> bool:
        raw = self.get(section, key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"[{section}] {key}: cannot parse {raw!r} as a boolean")

    def get_list(self, section: str, key: str) -> list[str]:
        raw = self.get(section, key).strip()
        return [p.strip() for p in raw.split(",") if p.strip()]

    def get_float_list(self, section: str, key: str) -> list[float]:
        return [float(p) for p in self.get_list(section, key)]

    def items(self):
        return {s: dict(kv) for s, kv in self._values.items()}


def load_config(path=None, overrides=None, env=None) -> PipelineConfig:
    """Merge defaults <- file <- environment <- explicit overrides.

    `overrides` maps "section.key" -> value (from command-line flags).
    """
    values = {section: dict(kv) for section, kv in DEFAULTS.items()}

    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file {path} not found")
        for section in parser.sections():
            bucket = values.setdefault(section, {})
            for key, value in parser.items(section):
                bucket[key] = value

    env = os.environ if env is None else env
    for name, value in sorted(env.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ValueError(f"malformed override {name}; expected {ENV_PREFIX}SECTION__KEY")
        section, key = rest.split("__", 1)
        values.setdefault(section.lower(), {})[key.lower()] = value

    for dotted, value in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        values.setdefault(section, {})[key] = str(value)

    alpha = float(values["harness"]["alpha"])
    if not 0.0 < alpha < 0.5:
        raise ValueError(f"harness.alpha must lie in (0, 0.5), got {alpha}")
    return PipelineConfig(values)
