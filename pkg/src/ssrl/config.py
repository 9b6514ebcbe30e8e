"""Run configuration: ``key = value`` files, ``--set`` overrides and dataset presets.

Resolution order is defaults, then the preset named by ``preset`` (from
either source), then file values, then overrides. Keys are dotted, e.g.
``rl.beta``; unknown keys are rejected with their line number.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from .errors import ConfigError
from .kg import DEFAULT_MAX_ACTIONS
from .trainer import Hyperparams

log = logging.getLogger(__name__)

THREADS_ENV = "SSRL_THREADS"

# entropy weight and baseline decay per stage, plus the best SL epoch count
PRESETS: dict[str, dict[str, object]] = {
    "fb15k-237": {"sl.beta": 0.0002, "rl.beta": 0.02, "sl.lambda": 0.02, "rl.lambda": 0.02,
                  "lr": 1e-3, "sl.epochs": 3},
    "nell-995": {"sl.beta": 0.02, "rl.beta": 0.05, "sl.lambda": 0.02, "rl.lambda": 0.02,
                 "lr": 1e-3, "sl.epochs": 5},
    "wn18rr": {"sl.beta": 0.02, "rl.beta": 0.05, "sl.lambda": 0.002, "rl.lambda": 0.05,
               "lr": 1e-3, "sl.epochs": 2},
    "fb60k": {"sl.beta": 0.02, "rl.beta": 0.2, "sl.lambda": 0.02, "rl.lambda": 0.02,
              "lr": 1e-3, "sl.epochs": 7},
}


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text: str) -> str | None:
    text = text.strip()
    return text or None


# key -> (parser, target); target is ("hyper", field), ("dims", field) or ("run", field)
_KEYS: dict[str, tuple[Callable[[str], object], str, str]] = {
    "preset": (_opt_str, "run", "preset"),
    "data.dir": (_opt_str, "run", "data_dir"),
    "data.graph": (_opt_str, "run", "graph_file"),
    "data.train": (_opt_str, "run", "train_file"),
    "data.dev": (_opt_str, "run", "dev_file"),
    "data.test": (_opt_str, "run", "test_file"),
    "data.max_actions": (int, "run", "max_actions"),
    "labels": (_opt_str, "run", "label_cache"),
    "out": (_opt_str, "run", "out_dir"),
    "seed": (int, "hyper", "seed"),
    "lr": (float, "hyper", "learning_rate"),
    "gamma": (float, "hyper", "gamma"),
    "optimizer": (str, "hyper", "optimizer"),
    "grad_clip": (float, "hyper", "grad_clip"),
    "batch_size": (int, "hyper", "batch_size"),
    "rollouts": (int, "hyper", "rollouts"),
    "horizon": (int, "hyper", "horizon"),
    "beam": (int, "hyper", "beam"),
    "threads": (int, "hyper", "threads"),
    "chunk_queries": (int, "hyper", "chunk_queries"),
    "sl.beta": (float, "hyper", "sl_beta"),
    "sl.lambda": (float, "hyper", "sl_lambda"),
    "sl.epochs": (int, "hyper", "sl_epochs"),
    "sl.max_steps": (int, "hyper", "sl_max_steps"),
    "sl.depth": (int, "hyper", "label_depth"),
    "sl.mask_answers": (_bool, "hyper", "mask_answers"),
    "sl.consume_step": (_bool, "hyper", "sl_consume_step"),
    "sl.max_resamples": (int, "hyper", "sl_max_resamples"),
    "sl.step_reduction": (str, "hyper", "sl_step_reduction"),
    "rl.beta": (float, "hyper", "rl_beta"),
    "rl.lambda": (float, "hyper", "rl_lambda"),
    "rl.batches": (int, "hyper", "rl_batches"),
    "eval.interval": (int, "hyper", "eval_interval"),
    "eval.beam": (int, "hyper", "eval_beam"),
    "eval.filtered": (_bool, "hyper", "filtered"),
    "model.entity_dim": (int, "dims", "entity_dim"),
    "model.hidden_dim": (int, "dims", "hidden_dim"),
    "model.mlp_dim": (int, "dims", "mlp_dim"),
}
KNOWN_KEYS = tuple(_KEYS)


@dataclass
class RunConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    preset: str | None = None
    data_dir: str | None = None
    graph_file: str | None = None
    train_file: str | None = None
    dev_file: str | None = None
    test_file: str | None = None
    max_actions: int = DEFAULT_MAX_ACTIONS
    label_cache: str | None = None
    out_dir: str | None = None

    def as_pairs(self) -> list[tuple[str, object]]:
        """Every key with its resolved value, in documented order."""
        out = []
        for key, (_, target, name) in _KEYS.items():
            src = {"run": self, "hyper": self.hyper, "dims": self.hyper.dims}[target]
            out.append((key, getattr(src, name)))
        return out

    def to_text(self) -> str:
        lines = []
        for k, v in self.as_pairs():
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"

    def resolve_file(self, split: str) -> Path | None:
        """Path of the ``graph``/``train``/``dev``/``test`` file, explicit or inside ``data.dir``."""
        explicit = getattr(self, f"{split}_file")
        if explicit:
            return Path(explicit)
        if self.data_dir is None:
            return None
        base = Path(self.data_dir)
        if split == "graph":
            cand = base / "graph.txt"
            return cand if cand.exists() else base / "train.txt"
        return base / f"{split}.txt"

    def validate(self, require_data: bool = False) -> None:
        self.hyper.validate()
        if self.max_actions < 1:
            raise ConfigError("data.max_actions must be >= 1")
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if require_data:
            g = self.resolve_file("graph")
            if g is None:
                raise ConfigError("no dataset given (set data.dir or data.graph)")
            for split in ("graph", "train"):
                p = self.resolve_file(split)
                if p is None or not p.exists():
                    raise ConfigError(f"{split} file not found: {p}")


def parse_lines(lines: Sequence[str], origin: str) -> list[tuple[str, str, str]]:
    """``key = value`` lines to ``(key, value, location)``; ``#`` starts a comment."""
    out = []
    for no, raw in enumerate(lines, 1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{origin}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (x.strip() for x in text.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{origin}:{no}: unknown key {key!r}")
        out.append((key, value, f"{origin}:{no}"))
    return out


def _apply(cfg: RunConfig, key: str, value: object, where: str) -> None:
    parse, target, name = _KEYS[key]
    if isinstance(value, str):
        try:
            value = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    if target == "run":
        setattr(cfg, name, value)
    elif target == "hyper":
        setattr(cfg.hyper, name, value)
    else:
        cfg.hyper.dims = replace(cfg.hyper.dims, **{name: value})


def parse_config(path: str | Path | None = None, overrides: Sequence[str] = (),
                 base: RunConfig | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from an optional file plus overrides."""
    entries = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        entries += parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p))
    entries += parse_lines(list(overrides), "--set")

    cfg = base if base is not None else RunConfig()
    cfg = replace(cfg, hyper=replace(cfg.hyper))
    env_threads = os.environ.get(THREADS_ENV)
    if env_threads:
        try:
            cfg.hyper.threads = max(1, int(env_threads))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env_threads!r}") from None

    preset = [(v.strip(), w) for k, v, w in entries if k == "preset"]
    if preset and preset[-1][0]:
        name, where = preset[-1]
        if name not in PRESETS:
            raise ConfigError(f"{where}: unknown preset {name!r}; choose from {sorted(PRESETS)}")
        for k, v in PRESETS[name].items():
            _apply(cfg, k, v, f"preset {name}")
    for key, value, where in entries:
        _apply(cfg, key, value, where)
    cfg.validate()
    return cfg


def version_string() -> str:
    from . import __version__
    return f"ssrl {__version__}"


def echo_config(cfg: RunConfig, out_dir: str | Path) -> None:
    """Write the resolved config and code version next to the run outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfg.to_text(), encoding="utf-8")
    (out / "VERSION").write_text(version_string() + "\n", encoding="utf-8")


def hyper_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg.hyper)
    return json.loads(json.dumps(d, default=str))
