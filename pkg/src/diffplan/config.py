"""Flat key=value run configuration shared by the CLI commands.

One namespace covers template, model, training, decoding, and data settings;
unknown keys are rejected so typos fail fast, and the resolved view is echoed
into every output artifact.
"""

from __future__ import annotations

from . import world
from .codec import build_template, degenerate_template
from .model import ModelConfig
from .training import ConfigError, TrainConfig


def _onoff(raw: str) -> bool:
    value = str(raw).strip().lower()
    if value in ("on", "true", "1", "yes"):
        return True
    if value in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {raw!r}")


def _cache(raw: str):
    value = str(raw).strip().lower()
    if value in ("off", "none", ""):
        return None
    return int(value)


# key -> (caster, default)
KNOWN_KEYS = {
    "seed": (int, 0),
    "template.waypoints": (int, 6),
    "template.int_digits": (int, 2),
    "template.frac_digits": (int, 1),
    "template.fixed_pattern": (_onoff, True),
    "model.d_model": (int, 64),
    "model.heads": (int, 4),
    "model.blocks": (int, 4),
    "model.d_ff": (int, 256),
    "model.patch_size": (int, 4),
    "train.epochs": (int, 4),
    "train.batch_size": (int, 32),
    "train.learning_rate": (float, 0.15),
    "train.t_min": (float, 0.01),
    "train.dataset": (str, ""),
    "train.checkpoint": (str, ""),
    "train.log": (str, ""),
    "decode.steps": (int, 32),
    "decode.tau": (float, 0.5),
    "decode.cache": (_cache, None),
    "data.kind": (str, "driving"),
    "data.count": (int, 1000),
    "data.out": (str, ""),
}


class RunConfig:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in KNOWN_KEYS.items()}
        for key, raw in (values or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        caster, _ = KNOWN_KEYS[key]
        try:
            self.values[key] = caster(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = (part.strip() for part in line.split("=", 1))
                cfg.set(key, raw)
        return cfg

    def echo(self) -> str:
        parts = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, bool):
                v = "on" if v else "off"
            parts.append(f"{key}={v}")
        return " ".join(parts)

    # ---- derived objects ----

    def template(self):
        tpl = build_template(
            self["template.waypoints"],
            (self["template.int_digits"], self["template.frac_digits"]),
        )
        return tpl if self["template.fixed_pattern"] else degenerate_template(tpl)

    def model_config(self, response_len: int) -> ModelConfig:
        return ModelConfig(
            d_model=self["model.d_model"],
            n_heads=self["model.heads"],
            n_blocks=self["model.blocks"],
            d_ff=self["model.d_ff"],
            patch_size=self["model.patch_size"],
            raster_size=world.RASTER_SIZE,
            raster_channels=world.RASTER_CHANNELS,
            context_len=world.CONTEXT_LEN,
            response_len=response_len,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            learning_rate=self["train.learning_rate"],
            seed=self["seed"],
            t_min=self["train.t_min"],
        )
