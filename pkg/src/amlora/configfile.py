"""Flat key=value experiment configs: parsing, overrides, digests, bridges.

A config is a plain dict with a fixed key set; unknown keys are rejected by
name so typos fail loudly. ``lambda`` accepts a single float or a
comma-separated per-task schedule. The digest is a sha256 over the canonical
serialization, so two runs with the same digest ran the same configuration.
"""

from __future__ import annotations

import hashlib

from .baselines import METHODS, MethodSpec
from .errors import ConfigError
from .harness import TrainConfig
from .model import ADAPTER_SITES, ModelConfig
from .selector import VARIANTS
from .tasks import GENERATORS, ORDERS, TaskStream, build_stream


def _int(key):
    def conv(v):
        try:
            return int(v)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got {v!r}")
    return conv


def _float(key):
    def conv(v):
        try:
            return float(v)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got {v!r}")
    return conv


def _choice(key, options):
    def conv(v):
        if v not in options:
            raise ConfigError(f"{key} must be one of {sorted(options)}, got {v!r}")
        return v
    return conv


def _lambda(v):
    try:
        parts = [float(p) for p in str(v).split(",")]
    except ValueError:
        raise ConfigError(f"lambda expects a number or comma list, got {v!r}")
    if any(p < 0 for p in parts):
        raise ConfigError("lambda values must be >= 0")
    return parts[0] if len(parts) == 1 else parts


def _sites(v):
    parts = tuple(p.strip() for p in str(v).split(",") if p.strip())
    bad = set(parts) - set(ADAPTER_SITES)
    if bad:
        raise ConfigError(f"sites contains unknown names {sorted(bad)}; "
                          f"valid sites are {ADAPTER_SITES}")
    if not parts:
        raise ConfigError("sites must name at least one adapter site")
    return parts


_SCHEMA = {
    "backbone": _choice("backbone", ("transformer", "mlp")),
    "d": _int("d"),
    "layers": _int("layers"),
    "heads": _int("heads"),
    "seq_len": _int("seq_len"),
    "vocab": _int("vocab"),
    "tasks": _int("tasks"),
    "classes": _int("classes"),
    "train_per_task": _int("train_per_task"),
    "eval_per_task": _int("eval_per_task"),
    "epochs": _int("epochs"),
    "lr": _float("lr"),
    "batch": _int("batch"),
    "r": _int("r"),
    "alpha": _float("alpha"),
    "lambda": _lambda,
    "variant": _choice("variant", VARIANTS),
    "sites": _sites,
    "order": _choice("order", tuple(ORDERS)),
    "seed": _int("seed"),
    "method": _choice("method", METHODS),
    "generator": _choice("generator", GENERATORS),
    "dropout": _float("dropout"),
    "p_sig": _float("p_sig"),
    "sig_tokens": _int("sig_tokens"),
    "optimizer": _choice("optimizer", ("adam", "sgd")),
    "pretrain_epochs": _int("pretrain_epochs"),
    "pretrain_lr": _float("pretrain_lr"),
}


def default_config() -> dict:
    return {
        "backbone": "transformer",
        "d": 32, "layers": 2, "heads": 4, "seq_len": 16, "vocab": 128,
        "tasks": 4, "classes": 4, "train_per_task": 1000,
        "eval_per_task": 400,
        "epochs": 1, "lr": 2e-2, "batch": 8,
        "r": 8, "alpha": 32.0, "lambda": 1e-5, "variant": "AR",
        "sites": ("query", "value"), "order": "order1",
        "seed": 0, "method": "amlora",
        "generator": "token_signature", "dropout": 0.1,
        "p_sig": 0.4, "sig_tokens": 6, "optimizer": "adam",
        "pretrain_epochs": 3, "pretrain_lr": 1e-3,
    }


def set_key(cfg: dict, key: str, value: str):
    """Parse and set one key, rejecting unknown names."""
    if key not in _SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    cfg[key] = _SCHEMA[key](value)


def parse_config(text: str, base: dict | None = None) -> dict:
    """key=value lines over the defaults; '#' starts a comment."""
    cfg = dict(default_config() if base is None else base)
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            set_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path: str, base: dict | None = None) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), base)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """KEY=VALUE strings, applied in order; later wins."""
    out = dict(cfg)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not KEY=VALUE")
        key, value = (s.strip() for s in ov.split("=", 1))
        set_key(out, key, value)
    return out


def format_config(cfg: dict) -> str:
    """Canonical one-key-per-line text; parsing it back gives an equal dict."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, (tuple, list)):
            v = ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()


def to_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        backbone=cfg["backbone"], vocab_size=cfg["vocab"],
        embed_dim=cfg["d"], num_layers=cfg["layers"], num_heads=cfg["heads"],
        seq_len=cfg["seq_len"], num_classes=cfg["classes"],
        dropout_rate=cfg["dropout"], adapter_sites=tuple(cfg["sites"]))


def to_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], lr=cfg["lr"],
                       batch_size=cfg["batch"], optimizer=cfg["optimizer"],
                       pretrain_epochs=cfg["pretrain_epochs"],
                       pretrain_lr=cfg["pretrain_lr"])


def to_method_spec(cfg: dict, method: str | None = None) -> MethodSpec:
    return MethodSpec(name=method or cfg["method"], rank=cfg["r"],
                      alpha=cfg["alpha"], variant=cfg["variant"],
                      lam=cfg["lambda"])


def to_stream(cfg: dict, seed: int | None = None) -> TaskStream:
    return build_stream(
        num_tasks=cfg["tasks"], num_classes=cfg["classes"],
        train_per_task=cfg["train_per_task"],
        eval_per_task=cfg["eval_per_task"], generator=cfg["generator"],
        vocab=cfg["vocab"], seq_len=cfg["seq_len"], dim=cfg["d"],
        seed=cfg["seed"] if seed is None else seed, order=cfg["order"],
        p_sig=cfg["p_sig"], sig_tokens_per_class=cfg["sig_tokens"])
