"""Run configuration: JSON files, dotted-path flag overrides, hashing,
run-directory layout, and per-module seed derivation."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError, DataError
from .seeding import derive_seed

DEFAULTS = {
    "seed": 0,
    "run_dir": "runs/default",
    "corpus": {
        "n_speakers": 4, "n_classes": 8, "n_utts": 200,
        "dur_lo": 0.8, "dur_hi": 1.6,
    },
    "encoder": {
        "d_s": 256, "n_layers": 6, "heads": 4, "pretrain_steps": 5000,
        "batch_size": 8, "crop_frames": 32, "lr": 1e-3,
        "freeze_frontend": False,
    },
    "adapter": {
        "d_z": 128, "bottleneck": "ae", "frame_rate": 50, "sigma": 0.1,
        "beta_kl": 1e-4, "tap_layer": 0,  # 0 = last layer
    },
    "decoder": {"hidden": 256, "n_dec": 4, "n_voc": 3},
    "stage1": {
        "total_steps": 10000, "warmup_steps": 5000, "peak_lr": 1e-4,
        "lambda_mel": 4.5, "lambda_adv": 0.1, "lambda_fm": 0.1,
        "lambda_sem": 1.0, "adversarial_start_step": -1,  # -1 = stage default
        "batch_size": 8, "crop_frames": 50, "log_every": 10,
        "checkpoint_every": 1000,
    },
    "stage2": {
        "total_steps": 10000, "warmup_steps": 5000, "peak_lr": 1e-4,
        "lambda_mel": 4.5, "lambda_adv": 0.1, "lambda_fm": 0.1,
        "lambda_sem": 1.0, "adversarial_start_step": -1,
        "batch_size": 8, "crop_frames": 50, "log_every": 10,
        "checkpoint_every": 1000, "reinit_discriminators": False,
    },
    "cfm": {
        "width": 256, "depth": 8, "heads": 4, "total_steps": 2000,
        "peak_lr": 2e-4, "batch_size": 16, "crop_frames": 48,
        "cond_drop_prob": 0.1, "guidance": 2.0, "use_prompt": False,
        "sample_steps": 32, "log_every": 50,
    },
    "eval": {"ref_clf_steps": 400, "max_utts": 0},  # 0 = all held-out
}


class RunConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def run_dir(self) -> Path:
        return Path(self.values["run_dir"])

    def module_seed(self, module: str) -> int:
        return derive_seed(self.seed, module)

    def hash(self) -> str:
        canonical = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.values, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            file_values = json.load(fh)
        return cls(_merge(copy.deepcopy(DEFAULTS), file_values, path=str(path)))


def _merge(base: dict, overlay: dict, path: str = "config") -> dict:
    for key, val in overlay.items():
        if key not in base:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{path}: {key!r} must be a section object")
            _merge(base[key], val, f"{path}.{key}")
        else:
            base[key] = _coerce(val, base[key], f"{path}.{key}")
    return base


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1"):
            return True
        if str(value).lower() in ("false", "0"):
            return False
        raise ConfigError(f"{where}: expected bool, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: expected int, got {value!r}") from exc
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: expected float, got {value!r}") from exc
    return str(value)


def build_config(config_file=None, overrides=()) -> RunConfig:
    """Defaults <- config file <- --section.key=value flags."""
    values = copy.deepcopy(DEFAULTS)
    if config_file is not None:
        with open(config_file) as fh:
            _merge(values, json.load(fh), path=str(config_file))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must be section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.lstrip("-").split(".")
        node = values
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[part]
        key = parts[-1]
        if key not in node or isinstance(node[key], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node[key] = _coerce(raw, node[key], dotted)
    return RunConfig(values)


RUN_DIR_ENTRIES = ("config.json", "metrics.jsonl", "checkpoints", "latents", "reports")


def run_directory_layout(cfg: RunConfig, resume: bool = False) -> dict[str, Path]:
    """Create (or reopen with resume=True) the fixed run-directory layout."""
    run = cfg.run_dir
    if run.exists() and any(run.iterdir()) and not resume:
        raise DataError(f"run directory {run} exists; pass --resume to reuse it")
    run.mkdir(parents=True, exist_ok=True)
    paths = {
        "root": run,
        "config": run / "config.json",
        "metrics": run / "metrics.jsonl",
        "checkpoints": run / "checkpoints",
        "latents": run / "latents",
        "reports": run / "reports",
    }
    for key in ("checkpoints", "latents", "reports"):
        paths[key].mkdir(exist_ok=True)
    if not resume or not paths["config"].exists():
        cfg.save(paths["config"])
    return paths


def latest_checkpoint(ckpt_dir) -> Path | None:
    best = None
    best_step = -1
    for p in Path(ckpt_dir).glob("step-*.wcck"):
        try:
            step = int(p.stem.split("-")[1])
        except (IndexError, ValueError):
            continue
        if step > best_step:
            best, best_step = p, step
    return best
