"""Run configuration: one strict JSON document covering scene synthesis,
training, paths, and the experiment protocol.

Unknown keys anywhere in the document are rejected so a typo cannot
silently fall back to a default. FOGDA_SEED, when set, overrides both the
scene seed and the training seed after every other source has been applied.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights
from .scenes import SceneSpec
from .training import PROTOCOLS, TrainConfig

CONFIG_VERSION = 1
SEED_ENV = "FOGDA_SEED"
LOCK_NAME = "config.lock.json"


class ConfigError(ValueError):
    """Malformed or invalid run configuration."""


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "run"


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    protocol: str = "da"
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        t = self.train
        train = {
            "iterations": t.iterations, "lr0": t.lr0, "tau": t.tau,
            "ema_decay": t.ema_decay,
            "weights": {"lam": t.weights.lam, "a": t.weights.a,
                        "b": t.weights.b, "c": t.weights.c},
            "da": t.da, "deb": t.deb, "cst": t.cst, "rec": t.rec, "pl": t.pl,
            "seed": t.seed, "pl_warmup": t.pl_warmup, "batch_size": t.batch_size,
            "depth_max": t.depth_max, "oracle_t": t.oracle_t,
            "oracle_clear": t.oracle_clear, "checkpoint_every": t.checkpoint_every,
            "eval_every": t.eval_every, "eval_split": t.eval_split,
        }
        return {
            "version": self.version,
            "protocol": self.protocol,
            "scene": self.scene.to_dict(),
            "train": train,
            "paths": {"data_dir": self.paths.data_dir, "run_dir": self.paths.run_dir},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _strict_kwargs(section: str, d: dict, allowed: set) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key {sorted(unknown)[0]!r} in config section {section!r}")
    return d


def _train_from_dict(d: dict) -> TrainConfig:
    allowed = {f.name for f in fields(TrainConfig)} - {"protocol", "weights"}
    _strict_kwargs("train", d, allowed | {"weights"})
    kwargs = {k: v for k, v in d.items() if k != "weights"}
    if "weights" in d:
        w = _strict_kwargs("train.weights", d["weights"], {"lam", "a", "b", "c"})
        kwargs["weights"] = LossWeights(**w)
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e


def from_dict(d: dict) -> RunConfig:
    _strict_kwargs("<top>", d, {"version", "protocol", "scene", "train", "paths"})
    version = d.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r} "
                          f"(this build reads version {CONFIG_VERSION})")
    protocol = d.get("protocol", "da")
    if protocol not in PROTOCOLS:
        raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
    try:
        scene = SceneSpec.from_dict(d.get("scene", {}))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scene config: {e}") from e
    train = _train_from_dict(d.get("train", {}))
    p = _strict_kwargs("paths", d.get("paths", {}), {"data_dir", "run_dir"})
    paths = PathsConfig(**{k: str(v) for k, v in p.items()})
    return RunConfig(version=version, protocol=protocol, scene=scene,
                     train=train, paths=paths)


def load_file(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing config file: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"malformed JSON in {path} at line {e.lineno} column {e.colno}: {e.msg}"
        ) from e
    if not isinstance(d, dict):
        raise ConfigError(f"config root in {path} must be a JSON object")
    return from_dict(d)


def resolve(config: RunConfig) -> RunConfig:
    """Apply the protocol to the train section and the seed env override.

    Returns the same object, mutated; callers lock the result to disk.
    """
    config.train.protocol = config.protocol
    if config.protocol == "source_only":
        config.train.da = config.train.deb = config.train.cst = False
        config.train.rec = config.train.pl = False
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        config.scene.seed = seed
        config.train.seed = seed
    return config
