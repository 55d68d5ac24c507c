"""Flat `key = value` configuration files.

One file configures both data generation and training; `#` starts a
comment, blank lines are skipped and unknown keys are errors.  Values are
typed from the dataclass defaults (ints, floats, bools, comma lists and the
`step:factor` drop list).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from ..errors import ConfigError
from .scenes import SceneConfig

DEFAULT_WIDTHS = (16, 32, 64, 96, 96)
DEFAULT_ANCHOR_SCALES = (24.0, 34.0, 48.0, 68.0, 96.0, 136.0, 192.0, 272.0,
                         384.0)


@dataclass
class TrainConfig:
    widths: tuple = DEFAULT_WIDTHS
    gate_kind: str = "channel"            # channel | spatio | none
    squeeze_ratio: int = 2
    k: int = 3
    gamma_off: float = 0.1
    use_deformable: bool = True
    use_ohem: bool = False
    ohem_n: int = 300
    couple_width: int = 64
    pooled_h: int = 7
    pooled_w: int = 7
    anchor_ratio: float = 0.41
    anchor_scales: tuple = DEFAULT_ANCHOR_SCALES
    rpn_pre_nms: int = 600
    rpn_post_nms: int = 300
    rpn_nms_thresh: float = 0.7
    final_nms_thresh: float = 0.5
    score_min: float = 0.01
    lr_base: float = 1e-3
    lr_warmup: float = 1e-4
    warmup_steps: int = 50
    lr_drops: tuple = ((300, 0.1), (400, 0.1))
    momentum: float = 0.9
    weight_decay: float = 5e-4
    minibatch: int = 256
    total_steps: int = 500
    checkpoint_every: int = 0             # 0: only the final checkpoint
    seed: int = 0

    def __post_init__(self):
        if self.gate_kind not in ("channel", "spatio", "none"):
            raise ConfigError(f"gate_kind {self.gate_kind!r} unknown")
        if self.squeeze_ratio < 1:
            raise ConfigError("squeeze_ratio must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.minibatch <= 0 or self.total_steps < 0:
            raise ConfigError("minibatch/total_steps out of range")
        if len(self.anchor_scales) != 9:
            raise ConfigError("exactly 9 anchor scales are required")


_SCENE_FIELDS = {f.name: f for f in fields(SceneConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
# `seed` appears in both configs and is shared deliberately
_ALL_KEYS = dict(_SCENE_FIELDS)
_ALL_KEYS.update(_TRAIN_FIELDS)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key == "lr_drops":
            if not raw:
                return ()
            out = []
            for part in raw.split(","):
                step_s, factor_s = part.split(":")
                out.append((int(step_s), float(factor_s)))
            return tuple(out)
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            elem = default[0] if default else 0.0
            cast = int if isinstance(elem, int) else float
            return tuple(cast(v) for v in raw.split(","))
        return raw
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def parse_config_text(text: str) -> tuple[SceneConfig, TrainConfig]:
    """Parse key = value lines into the two config objects."""
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value: {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        overrides[key] = _parse_value(key, raw, _ALL_KEYS[key].default)

    scene_kwargs = {k: v for k, v in overrides.items() if k in _SCENE_FIELDS}
    train_kwargs = {k: v for k, v in overrides.items() if k in _TRAIN_FIELDS}
    return SceneConfig(**scene_kwargs), TrainConfig(**train_kwargs)


def load_config(path) -> tuple[SceneConfig, TrainConfig]:
    with open(path, encoding="utf-8") as f:
        return parse_config_text(f.read())


def canonical_text(scene: SceneConfig, train: TrainConfig) -> str:
    """Stable serialization used for hashing and for config dumps."""
    lines = []
    for cfg in (scene, train):
        for f in sorted(fields(cfg), key=lambda f: f.name):
            v = getattr(cfg, f.name)
            if f.name == "lr_drops":
                v = ",".join(f"{s}:{fa!r}" for s, fa in v)
            elif isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(scene: SceneConfig, train: TrainConfig) -> str:
    return hashlib.sha256(
        canonical_text(scene, train).encode("utf-8")).hexdigest()
