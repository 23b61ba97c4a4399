"""Run configuration: a plain ``key=value`` file validated against a fixed schema.

One entry per line; blank lines and lines starting with ``#`` are
ignored; whitespace around keys and values is stripped. Unknown keys,
duplicate keys and unparsable values are errors.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from .data.concepts import UNSAFE_CATEGORIES
from .data.datasets import PANEL_SEED
from .exceptions import InvalidConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in text.replace(" ", "").split(",") if x)


def _category(text: str) -> str:
    if text not in UNSAFE_CATEGORIES:
        raise ValueError(f"category must be one of {', '.join(UNSAFE_CATEGORIES)}")
    return text


def _precision(text: str) -> int:
    v = int(text)
    if v not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    return v


def _path(text: str) -> str:
    return text


# key -> (parser, default, help)
SCHEMA: Dict[str, Tuple[Callable[[str], Any], Any, str]] = {
    "seed": (int, 0, "master seed"),
    "precision": (_precision, 64, "float width for model tensors (32 or 64)"),
    "T": (int, 100, "diffusion steps"),
    "beta_start": (float, 1e-4, "first beta of the linear schedule"),
    "beta_end": (float, 0.02, "last beta of the linear schedule"),
    "corpus": (_path, "", "base training corpus file (generated when empty)"),
    "corpus_size": (int, 2000, "records in a generated base corpus"),
    "base_steps": (int, 4000, "base training steps"),
    "base_batch_size": (int, 32, "base training batch size"),
    "base_lr": (float, 2e-3, "base training learning rate"),
    "category": (_category, "blob", "unsafe concept a patch targets"),
    "data": (_path, "", "directory written by build-data (generated when empty)"),
    "pair_size": (int, 500, "unsafe/safe pair records"),
    "benign_size": (int, 100, "benign records"),
    "unsafe_prompts": (int, 200, "distinct unsafe prompts behind the pair records"),
    "rewrite_k": (int, 4, "safe rewrites per unsafe prompt"),
    "images_per_prompt": (int, 4, "candidate images per safe rewrite"),
    "max_steps": (int, 10_000, "patch training step budget"),
    "batch_size": (int, 32, "patch training batch size"),
    "lr": (float, 1e-3, "patch learning rate"),
    "beta1": (float, 0.9, "Adam beta1"),
    "beta2": (float, 0.999, "Adam beta2"),
    "adam_eps": (float, 1e-8, "Adam epsilon"),
    "benign_mix_ratio": (float, 0.3, "probability that a batch slot is benign"),
    "log_every": (int, 50, "metrics log interval in steps"),
    "eval_every": (int, 0, "evaluation interval in steps (0 = off)"),
    "target_rate": (float, 0.40, "unsafe-probability target for steps-to-target"),
    "stop_at_target": (_bool, False, "stop training once the target is reached"),
    "panel_prompts": (int, 50, "prompts per evaluation panel"),
    "seeds_per_prompt": (int, 4, "sampling seeds per panel prompt"),
    "panel_seed": (int, PANEL_SEED, "seed that fixes the evaluation panels"),
    "count": (int, 1, "images per prompt for the sample command"),
    "sweep_sizes": (_int_list, (100, 500, 1000), "pair-dataset sizes for the sweep"),
    "sweep_seeds": (_int_list, (0, 1, 2), "training seeds per sweep size"),
}


@dataclass
class RunConfig:
    values: Dict[str, Any] = field(default_factory=lambda: {k: v[1] for k, v in SCHEMA.items()})
    source: Optional[str] = None

    def __getattr__(self, name: str):
        values = self.__dict__.get("values")
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def set(self, key: str, raw) -> None:
        if key not in SCHEMA:
            raise InvalidConfigError(f"unknown config key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(raw) if isinstance(raw, str) else raw
        except (TypeError, ValueError) as exc:
            raise InvalidConfigError(f"bad value for {key!r}: {exc}") from exc

    def update(self, overrides: Mapping[str, Any]) -> "RunConfig":
        for k, v in overrides.items():
            if v is not None:
                self.set(k, v)
        return self.validate()

    def validate(self) -> "RunConfig":
        v = self.values
        positive = ["T", "corpus_size", "base_steps", "base_batch_size", "pair_size", "benign_size",
                    "unsafe_prompts", "rewrite_k", "images_per_prompt", "max_steps", "batch_size", "log_every",
                    "panel_prompts", "seeds_per_prompt", "count"]
        for k in positive:
            if v[k] < 1:
                raise InvalidConfigError(f"{k} must be >= 1")
        if v["seed"] < 0 or v["eval_every"] < 0:
            raise InvalidConfigError("seed and eval_every must be >= 0")
        if not 0.0 <= v["benign_mix_ratio"] <= 1.0:
            raise InvalidConfigError("benign_mix_ratio must lie in [0, 1]")
        if not (0.0 < v["beta_start"] <= v["beta_end"] < 1.0):
            raise InvalidConfigError("betas must satisfy 0 < beta_start <= beta_end < 1")
        if not v["sweep_sizes"] or not v["sweep_seeds"]:
            raise InvalidConfigError("sweep_sizes and sweep_seeds must be non-empty")
        return self

    def to_text(self) -> str:
        def fmt(x):
            if isinstance(x, tuple):
                return ",".join(str(i) for i in x)
            if isinstance(x, bool):
                return "true" if x else "false"
            return str(x)

        return "".join(f"{k}={fmt(self.values[k])}\n" for k in SCHEMA)


def parse_config(text: str, source: Optional[str] = None) -> RunConfig:
    cfg = RunConfig(source=source)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise InvalidConfigError(f"{source or 'config'}:{lineno}: expected key=value")
        if key in seen:
            raise InvalidConfigError(f"{source or 'config'}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        cfg.set(key, value.strip())
    return cfg.validate()


def load_config(path: Optional[str]) -> RunConfig:
    if not path:
        return RunConfig().validate()
    if not os.path.isfile(path):
        raise InvalidConfigError(f"config file {path!r} not found")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), path)


def schema_help() -> List[str]:
    return [f"{k} (default {v[1]!r}): {v[2]}" for k, v in SCHEMA.items()]
