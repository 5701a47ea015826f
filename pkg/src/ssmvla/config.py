"""Run configuration: nested dataclasses with JSON round-trip and validation.

Environment variables ``SSMVLA_<SECTION>_<KEY>`` override individual fields,
e.g. ``SSMVLA_VLA_TRAIN_STEPS=500`` or ``SSMVLA_SEED=3``.
"""
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .errors import ConfigError
from .frontend import DEFAULT_BACKEND
from .lam import LAMConfig
from .objectives import LossWeights
from .policy import PolicyConfig

CONFIG_SCHEMA_VERSION = 1
ENV_PREFIX = "SSMVLA_"


@dataclass
class DataConfig:
    episodes: int = 500
    seed: int = 0
    horizon: int = 64
    holdout_fraction: float = 0.1
    no_depth_fraction: float = 0.0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    batch_size: int = 32
    steps: int = 5000
    warmup_fraction: float = 0.05
    log_every: int = 50
    checkpoint_every: int = 0


@dataclass
class VelocityConfig:
    hidden: int = 256
    layers: int = 3
    time_dim: int = 64


@dataclass
class LossConfig:
    lambda_lpips: float = 1.0
    lambda_d: float = 0.01
    lambda_vision: float = 0.1
    lambda_latent: float = 0.01
    velocity_sign: float = 1.0
    depth_weighting: str = "per_pixel"

    def weights(self):
        return LossWeights(self.lambda_lpips, self.lambda_d, self.lambda_vision, self.lambda_latent)


@dataclass
class EvalConfig:
    rollouts: int = 100
    chains: int = 100
    horizon: int = 64
    fm_steps: int = 10
    execute_steps: int = 8
    seed: int = 12345


@dataclass
class AblationConfig:
    lam_frames: int = 3
    attention: str = "synergistic"
    depth: str = "on"


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    frontend: dict = field(default_factory=lambda: dict(DEFAULT_BACKEND))
    lam: LAMConfig = field(default_factory=LAMConfig)
    lam_train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    velocity: VelocityConfig = field(default_factory=VelocityConfig)
    vla_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-3, weight_decay=1e-4, batch_size=64, steps=3000))
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def validate(self):
        a = self.ablation
        if a.lam_frames not in (0, 1, 3):
            raise ConfigError(f"ablation.lam_frames must be 0, 1 or 3, got {a.lam_frames}")
        if a.attention not in ("synergistic", "causal"):
            raise ConfigError(f"ablation.attention must be synergistic or causal, got {a.attention!r}")
        if a.depth not in ("on", "off"):
            raise ConfigError(f"ablation.depth must be on or off, got {a.depth!r}")
        for name in ("lam_train", "vla_train"):
            t = getattr(self, name)
            if t.steps < 1 or t.batch_size < 1 or t.lr <= 0:
                raise ConfigError(f"{name}: steps, batch_size and lr must be positive")
            if not 0 <= t.warmup_fraction < 1:
                raise ConfigError(f"{name}.warmup_fraction must be in [0, 1)")
        if not 0 <= self.data.holdout_fraction < 1:
            raise ConfigError("data.holdout_fraction must be in [0, 1)")
        if not 0 <= self.data.no_depth_fraction <= 1:
            raise ConfigError("data.no_depth_fraction must be in [0, 1]")
        if self.data.episodes < 0:
            raise ConfigError("data.episodes must be >= 0")
        if self.eval.execute_steps < 1 or self.eval.execute_steps > self.policy.chunk:
            raise ConfigError("eval.execute_steps must be in [1, policy.chunk]")
        if self.loss.depth_weighting not in ("per_pixel", "global"):
            raise ConfigError(f"loss.depth_weighting must be per_pixel or global")
        if self.loss.velocity_sign not in (1.0, -1.0):
            raise ConfigError("loss.velocity_sign must be +1 or -1")
        try:
            self.loss.weights()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    # derived views --------------------------------------------------------

    def lam_config(self, n_future=None):
        """LAM config, with ``n_future`` following the ablation frame count."""
        n = n_future or self.ablation.lam_frames or self.lam.n_future
        return dataclasses.replace(self.lam, n_future=n, seed=self.seed)

    def policy_config(self):
        a = self.ablation
        n = a.lam_frames or self.lam.n_future
        return dataclasses.replace(
            self.policy,
            n_future=n,
            tokens_per_frame=self.lam.tokens_per_frame,
            codebook_size=self.lam.codebook_size,
            attention=a.attention,
            depth=a.depth,
            context_dim=self.policy.context_dim,
            seed=self.seed,
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["schema_version"] = CONFIG_SCHEMA_VERSION
        return _jsonable(d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self):
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        version = d.pop("schema_version", CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config schema version {version}, expected {CONFIG_SCHEMA_VERSION}")
        return _build(cls, d, "").validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                raw = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(raw)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json() + "\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _coerce(value, default, where):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where}: expected a list of length {len(default)}, got {value!r}")
        return tuple(_coerce(v, d, where) for v, d in zip(value, default))
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {value!r}")
        return dict(value)
    return value


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    inst = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown config keys in {prefix or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        default = getattr(inst, f.name)
        where = f"{prefix}{f.name}"
        if f.name not in d:
            kwargs[f.name] = default
        elif dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), d[f.name], where + ".")
        else:
            kwargs[f.name] = _coerce(d[f.name], default, where)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(cfg, environ=None):
    """Return a new config with ``SSMVLA_*`` overrides applied.

    Keys are matched case-insensitively against ``section_field`` names;
    values are parsed as JSON when possible, else taken as strings.
    """
    environ = os.environ if environ is None else environ
    d = cfg.to_dict()
    targets = {}
    for key, val in d.items():
        if isinstance(val, dict) and key != "frontend":
            for sub in val:
                targets[f"{key}_{sub}".upper()] = (key, sub)
        else:
            targets[key.upper()] = (key, None)
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX) or name in ("SSMVLA_PURE_PYTHON", "SSMVLA_NO_EXT"):
            continue
        key = name[len(ENV_PREFIX) :]
        if key not in targets:
            raise ConfigError(f"environment override {name} matches no config field")
        section, sub = targets[key]
        value = _parse_env_value(raw)
        if sub is None:
            d[section] = value
        else:
            d[section][sub] = value
    return RunConfig.from_dict(d)


def load_config(path=None, seed=None, environ=None):
    cfg = RunConfig.load(path) if path else RunConfig().validate()
    cfg = apply_env_overrides(cfg, environ)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
        cfg.data.seed = int(seed)
    return cfg
