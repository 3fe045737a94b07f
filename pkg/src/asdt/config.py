"""Flat dotted-key run configuration.

File format: one ``key = value`` per line, ``#`` starts a comment. Values
are parsed according to the type of the default.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path
from typing import Any, Iterable, Mapping

OUTPUT_ENV = "ASDT_OUTPUT_DIR"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "data.root": "",
    "data.train": "train/manifest.tsv",
    "data.val": "val/manifest.tsv",
    "data.crop": 64,
    "data.scale_min": 0.7,
    "data.scale_max": 1.3,
    "data.flip_prob": 0.5,
    "model.seg_hidden": 64,
    "model.dilation": 12,
    "model.toy_dilation": 4,
    "pwm.T": 150,
    "pwm.tau": 5.0,
    "cam.theta_fg": 0.30,
    "cam.theta_bg": 0.05,
    "cam.scales": "0.5,1,1.5,2",
    "losses.sigma_D": 15.0,
    "losses.sigma_I": 100.0,
    "losses.radius": 5,
    "losses.lambda_str": 0.1,
    "crf.n_iters": 10,
    "crf.w_appearance": 4.0,
    "crf.theta_alpha": 80.0,
    "crf.theta_beta": 13.0,
    "crf.w_smoothness": 3.0,
    "crf.theta_gamma": 3.0,
    "crf.compat": 1.0,
    "optim.lr": 7e-4,
    "optim.head_lr_mult": 1.0,
    "optim.momentum": 0.9,
    "optim.weight_decay": 1e-5,
    "train.epochs": 8,
    "train.batch_size": 4,
    "train.mode": "V",
    "train.st_refresh": "onset",
    "retrain.lr": 2.5e-3,
    "retrain.momentum": 0.9,
    "retrain.weight_decay": 5e-4,
    "retrain.power": 0.9,
    "retrain.iters": 20000,
    "retrain.batch_size": 10,
    "runtime.deterministic": True,
    "output.dir": "runs",
}

MODES = ("I", "II", "III", "IV", "V")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _parse(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig(dict):
    """dict of dotted keys -> typed values, always a superset of DEFAULTS."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown configuration key")
        self[key] = _parse(key, value, DEFAULTS[key]) if isinstance(value, str) else value

    def updated(self, **overrides: Any) -> "RunConfig":
        out = RunConfig(self)
        for k, v in overrides.items():
            out.set(k.replace("__", "."), v)
        return out

    def floats(self, key: str) -> tuple[float, ...]:
        return tuple(float(v) for v in str(self[key]).split(",") if v.strip())

    def validate(self) -> "RunConfig":
        if int(self["pwm.T"]) != self["pwm.T"] or self["pwm.T"] < 2:
            raise ConfigError("pwm.T", f"must be an integer >= 2, got {self['pwm.T']}")
        if not self["pwm.tau"] > 1:
            raise ConfigError("pwm.tau", f"must be > 1, got {self['pwm.tau']}")
        if not 0 <= self["cam.theta_bg"] < self["cam.theta_fg"] <= 1:
            raise ConfigError("cam.theta_fg", "need 0 <= theta_bg < theta_fg <= 1")
        for key in ("losses.sigma_D", "losses.sigma_I", "losses.radius", "crf.theta_alpha", "crf.theta_beta",
                    "crf.theta_gamma", "crf.n_iters", "data.crop", "train.batch_size", "train.epochs",
                    "retrain.batch_size", "optim.lr"):
            if not self[key] > 0:
                raise ConfigError(key, "must be positive")
        if self["data.scale_min"] <= 0 or self["data.scale_max"] < self["data.scale_min"]:
            raise ConfigError("data.scale_min", "need 0 < scale_min <= scale_max")
        if self["train.st_refresh"] not in ("onset", "step"):
            raise ConfigError("train.st_refresh", "must be 'onset' or 'step'")
        if self["train.mode"] not in MODES:
            raise ConfigError("train.mode", f"must be one of {', '.join(MODES)}")
        if not self.floats("cam.scales"):
            raise ConfigError("cam.scales", "must list at least one scale")
        return self

    def snapshot(self) -> str:
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in sorted(self))

    def hash(self) -> str:
        return hashlib.sha256(self.snapshot().encode()).hexdigest()[:16]

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.snapshot())
        return path

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self["output.dir"])


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}", f"expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    values: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        values.update(parse_lines(p.read_text().splitlines(), str(p)))
    values.update(parse_lines(overrides, "--set"))
    return RunConfig(values)
