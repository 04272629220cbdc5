"""Run configuration: flat key=value files, defaults, overrides, and the echo.

Precedence, lowest to highest: built-in defaults, config file, the
DBREC_OUT environment variable (output directory only), command-line flags.
The fully resolved configuration is written beside every command's outputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .model import HyperParams, VARIANTS
from .training import TrainConfig

OUT_DIR_ENV = "DBREC_OUT"


@dataclass
class RunConfig:
    data_path: str = ""
    data_format: str = "movielens"
    out_dir: str = "runs/default"
    variant: str = "dbrec"
    seed: int = 0

    d: int = 128
    d_g: int = 64
    k: int = 5
    alpha: float = 0.01
    lr: float = 1e-4
    batch_size: int = 256
    neg_cf: int = 5
    neg_group: int = 5
    hidden_uv: tuple[int, ...] = (64, 16)
    hidden_ug: tuple[int, ...] = (64, 16)
    hidden_vg: tuple[int, ...] = (64, 16)
    hidden_hier: tuple[int, ...] = (64, 128)

    epochs: int = 100
    pretrain_epochs: int = 20
    eval_every: int = 5
    early_stop_evals: int = 10
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-4
    use_pretrain: bool = True
    pretrain_embeddings_only: bool = False

    train_ratio: float = 0.7
    valid_ratio: float = 0.1
    test_ratio: float = 0.2
    min_items_per_user: int = 5
    min_users_per_item: int = 2
    filter_fixpoint: bool = False

    eval_negatives: int = 99
    eval_max_pairs: int = 0
    eval_split: str = "test"

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (expected one of {sorted(VARIANTS)})")
        if self.data_format not in ("movielens", "amazon", "gowalla"):
            raise ConfigError(f"unknown data_format '{self.data_format}'")
        if self.eval_split not in ("valid", "test"):
            raise ConfigError(f"eval_split must be 'valid' or 'test', got '{self.eval_split}'")
        self.train_config()  # runs the numeric validations

    def hyper_params(self) -> HyperParams:
        return HyperParams(
            d=self.d,
            d_g=self.d_g,
            k=self.k,
            alpha=self.alpha,
            lr=self.lr,
            batch_size=self.batch_size,
            neg_cf=self.neg_cf,
            neg_group=self.neg_group,
            hidden_uv=self.hidden_uv,
            hidden_ug=self.hidden_ug,
            hidden_vg=self.hidden_vg,
            hidden_hier=self.hidden_hier,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig(
            hp=self.hyper_params(),
            epochs=self.epochs,
            pretrain_epochs=self.pretrain_epochs,
            eval_every=self.eval_every,
            early_stop_evals=self.early_stop_evals,
            kmeans_iters=self.kmeans_iters,
            kmeans_tol=self.kmeans_tol,
            use_pretrain=self.use_pretrain,
            pretrain_embeddings_only=self.pretrain_embeddings_only,
            eval_negatives=self.eval_negatives,
            eval_max_pairs=self.eval_max_pairs,
        )
        cfg.validate()
        return cfg

    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.valid_ratio, self.test_ratio)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_TUPLE_KEYS = {"hidden_uv", "hidden_ug", "hidden_vg", "hidden_hier"}
_BOOL_KEYS = {"use_pretrain", "pretrain_embeddings_only", "filter_fixpoint"}
_FLOAT_KEYS = {
    "alpha", "lr", "kmeans_tol", "train_ratio", "valid_ratio", "test_ratio",
}
_STR_KEYS = {"data_path", "data_format", "out_dir", "variant", "eval_split"}


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str):
    raw = raw.strip()
    if key in _TUPLE_KEYS:
        try:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"config key '{key}': expected comma-separated ints, got {raw!r}")
    if key in _BOOL_KEYS:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key '{key}': expected a boolean, got {raw!r}")
    if key in _FLOAT_KEYS:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"config key '{key}': expected a float, got {raw!r}")
    if key in _STR_KEYS:
        return raw
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key '{key}': expected an int, got {raw!r}")


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key '{key}'")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate config key '{key}'")
        values[key] = raw.strip()
    return values


def resolve_config(
    config_path=None,
    overrides: dict[str, str] | None = None,
    use_env: bool = True,
) -> RunConfig:
    """Merge defaults, file, environment, and flag overrides into a RunConfig."""
    cfg = RunConfig()
    if config_path is not None:
        for key, raw in parse_config_file(config_path).items():
            setattr(cfg, key, _coerce(key, raw))
    if use_env and os.environ.get(OUT_DIR_ENV):
        cfg.out_dir = os.environ[OUT_DIR_ENV]
    for key, raw in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key '{key}'")
        setattr(cfg, key, _coerce(key, raw) if isinstance(raw, str) else raw)
    return cfg


def write_config_echo(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
