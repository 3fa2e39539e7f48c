"""Flat run configuration: defaults, key=value / JSON files and overrides."""

from __future__ import annotations

import hashlib
import json
import os

DEFAULTS = {
    "seed": 0,
    "workers": 0,  # 0 = all available cores
    "cache_dir": "",  # empty = <run>/cache; MRGR_CACHE_DIR wins over both
    # data rules
    "data.short_window": 10,
    "data.max_len": 100,
    "data.min_item_interactions": 5,
    "data.min_seq_len": 20,
    # synthetic generator
    "synthetic.n_users": 2000,
    "synthetic.n_item_pairs": 200,
    "synthetic.n_filler": 300,
    "synthetic.seq_len": 60,
    "synthetic.anchor_lo": 1,
    "synthetic.anchor_hi": 20,
    "synthetic.p_long": 0.7,
    "synthetic.branching": 1,
    # backbone
    "model.d_model": 64,
    "model.n_layers": 4,
    "model.split_layer": 2,
    "model.n_heads": 4,
    "model.ff_dim": 128,
    "model.max_seq_len": 12,
    "model.dropout": 0.0,
    "backbone.lr": 1e-3,
    "backbone.batch_size": 128,
    "backbone.max_epochs": 200,
    "backbone.patience": 10,
    "backbone.min_epochs": 150,
    "backbone.p_prefix": 1.0,
    # memory
    "memory.pooling": "last",
    "memory.single_item": False,
    # annotation
    "annotate.tau_label": 1.0,
    "annotate.log_space": False,
    # retriever
    "retriever.lr": 1e-3,
    "retriever.batch_size": 64,
    "retriever.max_epochs": 100,
    "retriever.patience": 10,
    "retriever.hidden": 256,
    # evaluation
    "eval.ks": "1,5",
}

COMMENTS = {
    "workers": "parallel workers; results do not depend on this",
    "data.short_window": "most recent interactions fed to the model (h_t)",
    "data.max_len": "longest history considered at a cut",
    "synthetic.branching": "successors per filler item in the Markov chain",
    "backbone.p_prefix": "chance a training sample carries a random past-window prefix",
    "backbone.min_epochs": "no early stop before this epoch; prefix reading emerges late",
    "annotate.tau_label": "softmax temperature on deltas; grid 10, 1, 0.1, 0.01",
    "eval.ks": "cutoffs for Recall@K and NDCG@K",
}

GRIDS = {
    "annotate.tau_label": (10.0, 1.0, 0.1, 0.01),
}


class ConfigError(ValueError):
    pass


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            return int(text) if isinstance(default, int) else float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def _flatten(obj, prefix=""):
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_text(text, source="<config>"):
    """Parse key=value lines (# comments) or a JSON object, flat or nested."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            return _flatten(json.loads(stripped))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{source}: invalid JSON ({e.msg})") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(overrides=None, path=None, strict_grid=False):
    cfg = dict(DEFAULTS)
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw.update(parse_text(f.read(), str(path)))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    raw.update(overrides or {})
    for k, v in raw.items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    validate(cfg, strict_grid)
    return cfg


def validate(cfg, strict_grid=False):
    if not 0.0 <= cfg["synthetic.p_long"] <= 1.0:
        raise ConfigError("synthetic.p_long must lie in [0, 1]")
    if not 0.0 <= cfg["backbone.p_prefix"] <= 1.0:
        raise ConfigError("backbone.p_prefix must lie in [0, 1]")
    if cfg["annotate.tau_label"] <= 0:
        raise ConfigError("annotate.tau_label must be positive")
    if cfg["memory.pooling"] not in ("last", "mean"):
        raise ConfigError("memory.pooling must be 'last' or 'mean'")
    if cfg["model.max_seq_len"] < cfg["data.short_window"] + 2:
        raise ConfigError("model.max_seq_len must hold the short window plus prefix and PRED slots")
    ks(cfg)
    if strict_grid:
        for k, grid in GRIDS.items():
            if cfg[k] not in grid:
                raise ConfigError(f"{k}={cfg[k]} is outside its grid {grid}")


def ks(cfg):
    try:
        out = tuple(int(k) for k in str(cfg["eval.ks"]).split(","))
    except ValueError:
        raise ConfigError(f"eval.ks must be comma-separated integers, got {cfg['eval.ks']!r}") from None
    if not out or min(out) < 1:
        raise ConfigError("eval.ks entries must be at least 1")
    return out


def dump(cfg=None):
    cfg = cfg or DEFAULTS
    lines = []
    for k in DEFAULTS:
        if k in COMMENTS:
            lines.append(f"# {COMMENTS[k]}")
        v = cfg[k]
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg, exclude=("workers", "cache_dir")):
    """Hash of the settings that can change results."""
    blob = json.dumps({k: v for k, v in sorted(cfg.items()) if k not in exclude}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def cache_dir(cfg, run_dir):
    return os.environ.get("MRGR_CACHE_DIR") or cfg.get("cache_dir") or os.path.join(run_dir, "cache")
