"""Run configuration: flat ``key=value`` text, with ``include=`` for presets.

A config file is a list of ``key=value`` lines. Blank lines and lines
starting with ``#`` are ignored. ``include=NAME`` pulls in either a built-in
scenario preset (``ssmis``, ``umda``, ``semimdg``) or another file, resolved
relative to the including file. Keys set in a file override anything it
includes, regardless of line order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .datagen import PRESETS
from .errors import ConfigError
from .training import TrainConfig

# Desk-scale defaults shared by every scenario: small batches, short runs.
_DESK = {
    "batch_size": "8",
    "total_iters": "2000",
    "lr_init": "0.01",
    "alpha": "0.5",
    "patch_size": "32",
    "checkpoint_every": "500",
}
PRESET_VALUES: dict[str, dict[str, str]] = {name: {"preset": name, **_DESK} for name in PRESETS}

RUN_KEYS = ("preset", "corpus", "deterministic", "eval_split")
_TRAIN_KEYS = tuple(TrainConfig.__dataclass_fields__)


def _parse_bool(key: str, text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"option {key}: expected true/false, got {text!r}")


def parse_config_text(text: str, source: str = "<text>", base_dir: Path | None = None,
                      _stack: tuple[str, ...] = ()) -> dict[str, str]:
    """Resolve includes and return the flat mapping described by ``text``."""
    included: dict[str, str] = {}
    own: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key == "include":
            included.update(resolve_include(value, base_dir, _stack + (source,), f"{source}:{lineno}"))
            continue
        if key in own:
            raise ConfigError(f"{source}:{lineno}: {key} set twice")
        if key not in RUN_KEYS and key not in _TRAIN_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown option {key!r}")
        own[key] = value
    return {**included, **own}


def resolve_include(name: str, base_dir: Path | None, stack: tuple[str, ...], where: str) -> dict[str, str]:
    if name in PRESET_VALUES:
        return dict(PRESET_VALUES[name])
    path = Path(name)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    if str(path) in stack:
        raise ConfigError(f"{where}: include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"{where}: include {name!r} is neither a preset {PRESETS} nor a file")
    return parse_config_text(path.read_text(), str(path), path.parent, stack)


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), str(path), path.parent, ())


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: str = ""
    preset: str = "semimdg"
    deterministic: bool = False
    eval_split: str = "test"

    @classmethod
    def from_values(cls, values: dict[str, str]) -> "RunConfig":
        values = dict(values)
        preset = values.pop("preset", "semimdg")
        if preset not in PRESETS:
            raise ConfigError(f"option preset: must be one of {PRESETS}, got {preset!r}")
        # the preset's desk defaults sit under everything given explicitly
        merged = {**PRESET_VALUES[preset], **values}
        merged.pop("preset")
        corpus = merged.pop("corpus", "")
        deterministic = _parse_bool("deterministic", merged.pop("deterministic", "false"))
        eval_split = merged.pop("eval_split", "test")
        if eval_split not in ("test", "labeled"):
            raise ConfigError(f"option eval_split: must be test or labeled, got {eval_split!r}")
        return cls(TrainConfig.from_strings(merged), corpus, preset, deterministic, eval_split)

    def to_values(self) -> dict[str, str]:
        out = {"preset": self.preset, "corpus": self.corpus,
               "deterministic": str(self.deterministic).lower(), "eval_split": self.eval_split}
        out.update(self.train.to_strings())
        return out

    def to_text(self) -> str:
        """Self-contained snapshot (no includes); parsing it yields this config again."""
        return "".join(f"{k}={v}\n" for k, v in sorted(self.to_values().items()))

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        return cls.from_values(parse_config_text(text, source))
