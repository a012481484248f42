"""Model and run configuration.

The text config format is flat ``key: value`` lines (``#`` starts a
comment).  Recognized keys match the ``ModelConfig`` field names; unknown
keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


MODES = ("ranking", "cascading")
SEQUENCE_FILTERS = ("all", "long_view_only")


@dataclass
class ModelConfig:
    """Hyperparameters of one engine instance.

    ``L`` is the number of cached attention depths; the model runs L+1
    attention layers total (layer 0 consumes ID embeddings, layers 1..L
    consume cached vectors).  The external cache footprint per active user
    window is ``C = L * n * d`` scalars.
    """

    L: int = 1
    n: int = 50
    d: int = 16
    F: int = 16
    d_ff: int | None = None  # defaults to 2*d
    K: int = 0  # GSU top-K; 0 disables search
    learning_rate: float = 0.05
    embedding_table_capacity: int = 1_000_000
    n_retain: int | None = None  # cache window per (user, depth); defaults to n
    seed: int = 0
    mode: str = "ranking"
    sequence_filter: str = "all"
    history_capacity: int | None = None  # per-user event ring; defaults below
    gsu_candidates: int | None = None  # long-history length searched; defaults to n_retain

    def __post_init__(self) -> None:
        if self.L < 0:
            raise ConfigError(f"L must be >= 0, got {self.L}")
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.d < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")
        if self.F < 1:
            raise ConfigError(f"F must be >= 1, got {self.F}")
        if self.d_ff is None:
            self.d_ff = 2 * self.d
        if self.d_ff < 1:
            raise ConfigError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.K < 0:
            raise ConfigError(f"K must be >= 0, got {self.K}")
        if self.K > self.n:
            raise ConfigError(f"K must be <= n when GSU is enabled, got K={self.K} n={self.n}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.embedding_table_capacity < 1:
            raise ConfigError("embedding_table_capacity must be >= 1")
        if self.n_retain is None:
            self.n_retain = self.n
        if self.n_retain < 1:
            raise ConfigError(f"n_retain must be >= 1, got {self.n_retain}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sequence_filter not in SEQUENCE_FILTERS:
            raise ConfigError(
                f"sequence_filter must be one of {SEQUENCE_FILTERS}, got {self.sequence_filter!r}"
            )
        if self.history_capacity is None:
            # room for the raw window, the retrieval window, and filtered queries
            self.history_capacity = max(4 * self.n, 512)
        if self.history_capacity < self.n:
            raise ConfigError("history_capacity must be >= n")
        if self.gsu_candidates is None:
            self.gsu_candidates = self.n_retain
        if self.gsu_candidates < 1:
            raise ConfigError("gsu_candidates must be >= 1")

    @property
    def cache_size(self) -> int:
        """C = L * n * d, the scaling-law x-axis."""
        return self.L * self.n * self.d

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


_INT_KEYS = {
    "L", "n", "d", "F", "d_ff", "K", "embedding_table_capacity",
    "n_retain", "seed", "history_capacity", "gsu_candidates",
}
_FLOAT_KEYS = {"learning_rate"}
_STR_KEYS = {"mode", "sequence_filter"}
_ALL_KEYS = _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def parse_config_text(text: str) -> ModelConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, _, val = line.partition(":")
        key = key.strip()
        val = val.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        try:
            if key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {val!r}") from exc
    return ModelConfig(**values)


def load_config(path: str | Path) -> ModelConfig:
    return parse_config_text(Path(path).read_text())


def dump_config(config: ModelConfig) -> str:
    lines = []
    for f in fields(config):
        lines.append(f"{f.name}: {getattr(config, f.name)}")
    return "\n".join(lines) + "\n"
