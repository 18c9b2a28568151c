"""Training configuration: ``key=value`` text files plus command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from pagan.augment import AugmentConfig
from pagan.errors import ConfigError
from pagan.objectives import FDIVERGENCES, GAME_KINDS, GameKind

DATASETS = ("ring", "shapes", "mnist")
OPTIMIZERS = ("adam", "sgd")
FUSIONS = ("auto", "width", "channel")
GAME_ALIASES = {"standard-minimax": "standard", "non-saturating": "nonsaturating",
                "f-divergence": "fgan", "wasserstein-gp": "wasserstein", "wgan": "wasserstein"}

# keys that do not change what is being trained; excluded from the config hash
RUN_LENGTH_KEYS = ("steps", "checkpoint_every", "eval_every", "final_metrics")


@dataclass
class TrainConfig:
    dataset: str = "ring"
    data_dir: str = "data/mnist"
    n_data: int = 10000
    batch_size: int = 64
    steps: int = 5000
    optimizer: str = "adam"
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    critic_steps: int = 0
    game: str = "nonsaturating"
    fdiv: str = "js"
    gp_lambda: float = 10.0
    alpha_mode: str = "shared"
    pad_fraction: float = 0.1
    jitter_std: float = 0.05
    latent_dim: int = 0
    width: int = 16
    depth: int = 3
    hidden: str = "128,128"
    fusion: str = "auto"
    ring_modes: int = 8
    ring_radius: float = 2.0
    ring_std: float = 0.05
    seed: int = 0
    checkpoint_every: int = 1000
    eval_every: int = 1000
    final_metrics: bool = True
    probe_epochs: int = 3

    def __post_init__(self):
        self.game = GAME_ALIASES.get(self.game, self.game)
        if self.critic_steps == 0:
            self.critic_steps = 10 if self.game == "wasserstein" else 1
        if self.latent_dim == 0:
            self.latent_dim = 2 if self.dataset == "ring" else 16
        self.validate()

    def validate(self):
        def bad(key, why):
            raise ConfigError(f"{key}={getattr(self, key)!r}: {why}", key)

        if self.dataset not in DATASETS:
            bad("dataset", f"must be one of {DATASETS}")
        if self.optimizer not in OPTIMIZERS:
            bad("optimizer", f"must be one of {OPTIMIZERS}")
        if self.game not in GAME_KINDS:
            bad("game", f"must be one of {GAME_KINDS}")
        if self.fusion not in FUSIONS:
            bad("fusion", f"must be one of {FUSIONS}")
        if self.batch_size < 2:
            bad("batch_size", "must be >= 2")
        if self.critic_steps < 1:
            bad("critic_steps", "must be >= 1")
        if self.lr < 0:
            bad("lr", "must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            bad("beta1", "betas must lie in [0, 1)")
        if self.steps < 0:
            bad("steps", "must be >= 0")
        if self.latent_dim < 1:
            bad("latent_dim", "must be >= 1")
        if self.n_data < self.batch_size:
            bad("n_data", "must be at least batch_size")
        if self.ring_modes < 1:
            bad("ring_modes", "must be >= 1")
        if self.ring_std <= 0:
            bad("ring_std", "must be > 0")
        if self.fdiv not in FDIVERGENCES:
            bad("fdiv", f"must be one of {tuple(sorted(FDIVERGENCES))}")
        if not self.gp_lambda > 0:
            bad("gp_lambda", "must be > 0")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            bad("checkpoint_every", "intervals must be >= 0")
        try:
            self.game_kind
        except ValueError as exc:
            raise ConfigError(str(exc), "game") from None
        try:
            self.augment
        except ValueError as exc:
            raise ConfigError(str(exc), "pad_fraction") from None
        try:
            self.hidden_sizes
        except ValueError:
            bad("hidden", "must be comma-separated positive integers")

    @property
    def game_kind(self):
        return GameKind(self.game, self.fdiv, self.gp_lambda, self.alpha_mode)

    @property
    def augment(self):
        return AugmentConfig(self.pad_fraction, self.seed, self.jitter_std)

    @property
    def hidden_sizes(self):
        sizes = tuple(int(s) for s in self.hidden.split(",") if s.strip())
        if not sizes or min(sizes) < 1:
            raise ValueError(self.hidden)
        return sizes

    @property
    def resolved_fusion(self):
        if self.fusion != "auto":
            return self.fusion
        return "channel" if self.game == "wasserstein" else "width"

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        text = "".join(line + "\n" for line in self.to_text().splitlines()
                       if line.split("=", 1)[0] not in RUN_LENGTH_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _convert(key, raw):
    ftype = _FIELDS[key].type
    raw = raw.strip()
    try:
        if ftype == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}", key) from None
    return raw


def parse_pairs(items, source="flags"):
    """``["k=v", ...]`` -> dict, rejecting unknown keys and malformed items."""
    values = {}
    for item in items:
        item = item.strip()
        if not item or item.startswith("#"):
            continue
        if "=" not in item:
            raise ConfigError(f"{source}: expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{source}: unknown key {key!r}", key)
        values[key] = _convert(key, raw)
    return values


def parse_config(path=None, overrides=(), env=None):
    """Build a TrainConfig from an optional file, then ``overrides``, then $PAGAN_SEED."""
    values = {}
    if path is not None:
        text = Path(path).read_text()
        lines = [tok for line in text.splitlines() for tok in line.split("#", 1)[0].split()]
        values.update(parse_pairs(lines, source=str(path)))
    if isinstance(overrides, dict):
        overrides = [f"{k}={v}" for k, v in overrides.items()]
    values.update(parse_pairs(overrides))
    env = os.environ if env is None else env
    if env.get("PAGAN_SEED"):
        values["seed"] = _convert("seed", env["PAGAN_SEED"])
    return TrainConfig(**values)


def config_from_text(text):
    return TrainConfig(**parse_pairs(text.splitlines(), source="config text"))
