"""Run configuration: flat key=value files, presets, and the scalar dtype switch."""

from __future__ import annotations

import numpy as np


class ConfigError(Exception):
    """Bad key, bad value, or inconsistent configuration. CLI exit code 2."""


class DataError(Exception):
    """Missing or malformed dataset / checkpoint input. CLI exit code 3."""


class NumericError(Exception):
    """Non-finite value where a finite one is required. CLI exit code 4."""


# Scalar precision is a process-wide switch: float64 for oracles and gradient
# checks, float32 allowed for training runs.
_DTYPE = np.float64


def set_dtype(name):
    global _DTYPE
    if name not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, got {name!r}")
    _DTYPE = np.float64 if name == "float64" else np.float32


def dtype():
    return _DTYPE


# key -> (type, default, help). `bool` values parse from true/false.
SCHEMA = {
    "preset": (str, "desk", "parameter preset: desk | paper"),
    "seed": (int, 0, "master RNG seed"),
    "dtype": (str, "float64", "scalar precision: float64 | float32"),
    # model geometry
    "frame_height": (int, 64, "frame height, divisible by 4"),
    "frame_width": (int, 64, "frame width, divisible by 4"),
    "channels": (int, 16, "encoder feature channels C"),
    "token_dim": (int, 32, "token embedding dim C_e"),
    "blocks": (int, 2, "number of focal transformer blocks"),
    "heads": (int, 2, "attention heads"),
    "deform_kernel": (int, 3, "deformable conv kernel size K (odd)"),
    "deform_groups": (int, 2, "deformable conv groups G"),
    "local_frames": (int, 3, "local window length T_l for training clips"),
    "nonlocal_frames": (int, 2, "non-local reference frames T_nl"),
    "window_h": (int, 3, "attention sub-window height s_h"),
    "window_w": (int, 3, "attention sub-window width s_w"),
    "split_kernel": (int, 7, "soft-split patch kernel"),
    "split_stride": (int, 3, "soft-split stride"),
    "split_pad": (int, 3, "soft-split zero padding"),
    "f3n_channels": (int, 2, "per-pixel channels of the F3N fold canvas"),
    "flow_levels": (int, 3, "flow pyramid levels"),
    "disc_channels": (int, 8, "discriminator base channels"),
    # losses / optimizer
    "w_rec": (float, 1.0, "reconstruction loss weight"),
    "w_adv": (float, 0.01, "adversarial loss weight"),
    "w_flow": (float, 1.0, "flow consistency loss weight"),
    "lr": (float, 5e-4, "Adam learning rate"),
    "beta1": (float, 0.0, "Adam beta1"),
    "beta2": (float, 0.99, "Adam beta2"),
    "lr_drop_iter": (int, 0, "iteration of the single x0.1 LR drop (0 = never)"),
    "iterations": (int, 1000, "training iterations"),
    "ckpt_every": (int, 500, "checkpoint interval in iterations"),
    "flow_pretrain_iters": (int, 200, "flow-only warmup steps used when freeze_flow is set"),
    # inference
    "sliding_window": (int, 10, "local window size for sliding-window inference"),
    "sampling_rate": (int, 10, "non-local frame sampling rate at inference"),
    # data generation
    "scenes": (int, 40, "scenes rendered by the gen command"),
    "scene_frames": (int, 12, "frames per rendered scene"),
    "train_scenes": (int, 32, "scenes used for training (prefix of the dataset)"),
    "eval_scenes": (int, 8, "held-out scenes for evaluation (after the training prefix)"),
    "sprite_min_size": (int, 14, "minimum sprite extent in pixels"),
    "sprite_max_size": (int, 26, "maximum sprite extent in pixels"),
    "fractional_velocities": (bool, False, "allow non-integer sprite velocities"),
    "max_flow": (float, 10.0, "sanity bound on flow magnitude at 1/4 resolution, pixels"),
    # paths
    "data_dir": (str, "data", "dataset directory"),
    "checkpoint": (str, "model.ckpt", "checkpoint path"),
    "report": (str, "report.txt", "evaluation report path"),
    "log": (str, "train.log", "training loss log path"),
    # ablations
    "disable_propagation": (bool, False, "bypass flow-guided feature propagation"),
    "disable_flow_loss": (bool, False, "train without the flow consistency loss"),
    "freeze_flow": (bool, False, "freeze flow net after a flow-only warmup"),
    "disable_dcn": (bool, False, "propagate with plain flow warping, no deformable alignment"),
    "attention": (str, "focal", "attention mode: focal | local | global"),
}

PRESETS = {
    "desk": {},
    "paper": {
        "frame_height": 240,
        "frame_width": 432,
        "channels": 128,
        "token_dim": 512,
        "blocks": 8,
        "heads": 4,
        "deform_groups": 16,
        "local_frames": 5,
        "nonlocal_frames": 3,
        "window_h": 5,
        "window_w": 9,
        "f3n_channels": 40,
        "disc_channels": 64,
        "lr": 1e-4,
        "lr_drop_iter": 400_000,
        "iterations": 500_000,
    },
}


def _parse_value(key, raw):
    typ = SCHEMA[key][0]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key}: expected true/false, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"key {key}: cannot parse {raw!r} as {typ.__name__}") from None


class RunConfig:
    """Flat configuration mapping; echoed verbatim into checkpoints and reports."""

    def __init__(self, values=None):
        self._values = {k: spec[1] for k, spec in SCHEMA.items()}
        if values:
            for k, v in values.items():
                self.set(k, v)

    def set(self, key, value):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        typ = SCHEMA[key][0]
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ):
            raise ConfigError(f"key {key}: expected {typ.__name__}, got {type(value).__name__}")
        self._values[key] = value

    def __getattr__(self, key):
        values = object.__getattribute__(self, "_values")
        if key in values:
            return values[key]
        raise AttributeError(key)

    def get(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def apply_preset(self, name):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        self._values["preset"] = name
        for k, v in PRESETS[name].items():
            self._values[k] = v

    def validate(self):
        if self.frame_height % 4 or self.frame_width % 4:
            raise ConfigError("frame_height and frame_width must be divisible by 4")
        if self.deform_kernel % 2 == 0:
            raise ConfigError("deform_kernel must be odd")
        if self.channels % self.deform_groups:
            raise ConfigError("channels must be divisible by deform_groups")
        if self.token_dim % self.heads:
            raise ConfigError("token_dim must be divisible by heads")
        if self.attention not in ("focal", "local", "global"):
            raise ConfigError(f"attention must be focal|local|global, got {self.attention!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64|float32, got {self.dtype!r}")
        m, n = self.token_grid_shape()
        if m < 1 or n < 1:
            raise ConfigError("soft-split geometry yields an empty token grid")
        if m % self.window_h:
            raise ConfigError(f"token grid height {m} not divisible by window_h {self.window_h}")
        if n % self.window_w:
            raise ConfigError(f"token grid width {n} not divisible by window_w {self.window_w}")
        return self

    def token_grid_shape(self):
        k, s, p = self.split_kernel, self.split_stride, self.split_pad
        m = (self.frame_height // 4 + 2 * p - k) // s + 1
        n = (self.frame_width // 4 + 2 * p - k) // s + 1
        return m, n

    def render(self):
        """Serialize as sorted key=value lines (the echo format)."""
        lines = []
        for k in sorted(self._values):
            v = self._values[k]
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            raw[key] = _parse_value(key, val)
        cfg = cls()
        if "preset" in raw:
            cfg.apply_preset(raw["preset"])
        for k, v in raw.items():
            if k != "preset":
                cfg.set(k, v)
        return cfg

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        return cls.from_text(text)
