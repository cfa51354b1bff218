"""Experiment configuration: an INI-style ``key = value`` file with sections.

Keys are unique across sections, so the file reads as a flat mapping; the
sections only group related settings.  Missing keys take per-experiment
defaults, unknown keys are rejected, and the resolved configuration can be
written back out and reloaded unchanged.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import re
from dataclasses import dataclass
from pathlib import Path

from ..rkmeta import ConfigurationError, StageGradMode, parse_tableau

EXPERIMENTS = ("regression", "classification", "navigation", "order_check")
AUTO = "auto"


class ConfigError(ConfigurationError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.key = key


# key -> section, in emission order
SECTIONS = {
    "experiment": "experiment",
    "tableau": "experiment",
    "mode": "experiment",
    "seed": "experiment",
    "meta_iterations": "training",
    "task_batch_size": "training",
    "shots": "training",
    "query_size": "training",
    "h": "training",
    "inner_h": "training",
    "inner_lr": "training",
    "optimizer": "training",
    "n_way": "training",
    "feature_dim": "training",
    "noise_std": "training",
    "rollouts_per_task": "training",
    "horizon": "training",
    "adaptation_steps": "evaluation",
    "test_tasks": "evaluation",
    "eval_lr": "evaluation",
    "eval_rollouts": "evaluation",
    "field": "order_check",
    "h_max": "order_check",
    "h_min": "order_check",
    "n_steps": "order_check",
    "out_dir": "output",
}

DEFAULTS: dict[str, dict] = {
    "regression": dict(
        tableau="midpoint", mode="differentiate", meta_iterations=10000, task_batch_size=25,
        shots=10, query_size=10, h=0.0005, inner_h=AUTO, inner_lr=0.01, optimizer="sgd",
        adaptation_steps=10, test_tasks=600, eval_lr=AUTO,
    ),
    "classification": dict(
        tableau="midpoint", mode="differentiate", meta_iterations=2000, task_batch_size=10,
        shots=1, query_size=15, h=0.01, inner_h=AUTO, inner_lr=0.4, optimizer="sgd",
        n_way=5, feature_dim=8, noise_std=0.2, adaptation_steps=3, test_tasks=200, eval_lr=AUTO,
    ),
    "navigation": dict(
        tableau="midpoint", mode="evaluate", meta_iterations=200, task_batch_size=40,
        h=0.01, inner_h=AUTO, inner_lr=0.16, optimizer="sgd", rollouts_per_task=20,
        horizon=100, adaptation_steps=3, test_tasks=20, eval_lr=AUTO, eval_rollouts=20,
    ),
    "order_check": dict(
        tableau="midpoint", mode="evaluate", field="linear", h_max=0.1, h_min=0.001, n_steps=7,
    ),
}
COMMON = dict(seed=0, out_dir="results")

INT_KEYS = {
    "seed", "meta_iterations", "task_batch_size", "shots", "query_size", "n_way", "feature_dim",
    "rollouts_per_task", "horizon", "adaptation_steps", "test_tasks", "eval_rollouts", "n_steps",
}
FLOAT_KEYS = {"h", "inner_h", "inner_lr", "noise_std", "eval_lr", "h_max", "h_min"}
COUNT_KEYS = INT_KEYS - {"seed", "adaptation_steps", "meta_iterations"}


@dataclass
class ExperimentConfig:
    experiment: str = "regression"
    tableau: str | None = None
    mode: str | None = None
    seed: int | None = None
    meta_iterations: int | None = None
    task_batch_size: int | None = None
    shots: int | None = None
    query_size: int | None = None
    h: float | None = None
    inner_h: float | str | None = None
    inner_lr: float | str | None = None
    optimizer: str | None = None
    n_way: int | None = None
    feature_dim: int | None = None
    noise_std: float | None = None
    rollouts_per_task: int | None = None
    horizon: int | None = None
    adaptation_steps: int | None = None
    test_tasks: int | None = None
    eval_lr: float | str | None = None
    eval_rollouts: int | None = None
    field: str | None = None
    h_max: float | None = None
    h_min: float | None = None
    n_steps: int | None = None
    out_dir: str | None = None

    # ------------------------------------------------------------------
    def keys(self) -> list[str]:
        """Keys that apply to this experiment, in emission order."""
        applicable = set(DEFAULTS[self.experiment]) | set(COMMON) | {"experiment"}
        return [k for k in SECTIONS if k in applicable]

    def resolved(self) -> "ExperimentConfig":
        """Copy with defaults filled and every applicable value validated."""
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}", key="experiment")
        out = dataclasses.replace(self)
        defaults = {**COMMON, **DEFAULTS[self.experiment]}
        given = {k for k in defaults if getattr(self, k) is not None}
        # an explicit inner_h or inner_lr displaces the other's default
        if "inner_h" in given and "inner_lr" not in given:
            defaults["inner_lr"] = AUTO
        if "inner_lr" in given and "inner_h" not in given:
            defaults["inner_h"] = AUTO
        for key, value in defaults.items():
            if getattr(out, key) is None:
                setattr(out, key, value)
        for key in set(SECTIONS) - set(out.keys()):
            setattr(out, key, None)
        out._validate()
        return out

    def _validate(self) -> None:
        try:
            tab = parse_tableau(self.tableau)
        except ConfigurationError as exc:
            raise ConfigError(str(exc), key="tableau") from None
        try:
            StageGradMode(self.mode)
        except ValueError:
            raise ConfigError(f"mode must be evaluate or differentiate, got {self.mode!r}", key="mode") from None
        if self.mode == "differentiate" and tab.N > 2:
            raise ConfigError("differentiate mode supports at most two stages", key="mode")
        for key in self.keys():
            value = getattr(self, key)
            if key in COUNT_KEYS and value is not None and value < 1:
                raise ConfigError(f"{key} must be >= 1, got {value}", key=key)
        if self.adaptation_steps is not None and self.adaptation_steps < 0:
            raise ConfigError("adaptation_steps must be >= 0", key="adaptation_steps")
        if self.meta_iterations is not None and self.meta_iterations < 0:
            raise ConfigError("meta_iterations must be >= 0", key="meta_iterations")
        for key in ("h", "inner_h", "inner_lr", "eval_lr", "h_max", "h_min"):
            value = getattr(self, key)
            if isinstance(value, float) and not value > 0:
                raise ConfigError(f"{key} must be > 0, got {value}", key=key)
        if self.experiment in ("regression", "classification", "navigation"):
            if self.inner_h != AUTO and self.inner_lr != AUTO:
                raise ConfigError("set only one of inner_h and inner_lr (the other must be auto)", key="inner_lr")
            if self.optimizer not in ("sgd", "adam"):
                raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}", key="optimizer")
        if self.experiment == "classification" and self.n_way < 2:
            raise ConfigError("n_way must be >= 2", key="n_way")
        if self.experiment == "order_check":
            if self.field not in ("linear", "nonlinear", "forced"):
                raise ConfigError(f"unknown field {self.field!r}", key="field")
            if self.h_max / self.h_min < 100.0 * (1 - 1e-12) or self.n_steps < 4:
                raise ConfigError("order check needs >= 4 steps spanning >= 2 decades", key="h_min")

    # ------------------------------------------------------------------
    def stage_step(self) -> float:
        """Step used to place stage points (inner rate = this * q21)."""
        if self.inner_h != AUTO and self.inner_h is not None:
            return float(self.inner_h)
        tab = parse_tableau(self.tableau)
        if self.inner_lr not in (AUTO, None):
            return float(self.inner_lr) / tab.q21 if tab.N >= 2 else float(self.inner_lr)
        return float(self.h)

    def inner_rate(self) -> float:
        """Learning rate of the inner (fast-adaptation) step for this tableau."""
        tab = parse_tableau(self.tableau)
        q21 = tab.q21 if tab.N >= 2 else 0.5
        if self.inner_lr not in (AUTO, None):
            return float(self.inner_lr)
        return self.stage_step() * q21

    def adaptation_rate(self) -> float:
        if self.eval_lr in (AUTO, None):
            return self.inner_rate()
        return float(self.eval_lr)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in kw.items() if v is not None})

    # ------------------------------------------------------------------
    def to_text(self) -> str:
        """Canonical INI text of the resolved configuration."""
        cfg = self.resolved()
        buf = io.StringIO()
        current = None
        for key in cfg.keys():
            section = SECTIONS[key]
            if section != current:
                if current is not None:
                    buf.write("\n")
                buf.write(f"[{section}]\n")
                current = section
            buf.write(f"{key} = {_fmt(getattr(cfg, key))}\n")
        return buf.getvalue()

    def hash(self) -> str:
        """Short digest of the resolved settings; the output directory is not part of it."""
        text = "".join(
            line for line in self.to_text().splitlines(keepends=True) if not line.startswith("out_dir =")
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())
        return path


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(key: str, raw: str, line: int | None):
    raw = raw.strip()
    try:
        if key in INT_KEYS:
            return int(raw)
        if key in FLOAT_KEYS:
            if raw.lower() == AUTO:
                return AUTO
            return float(raw)
    except ValueError:
        kind = "an integer" if key in INT_KEYS else "a number"
        raise ConfigError(f"{key} must be {kind}, got {raw!r}", line, key) from None
    return raw


def _line_of(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*{re.escape(key)}\s*[=:]", re.IGNORECASE)
    for i, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return i
    return None


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r}", exc.lineno, exc.option) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line (expected key = value)", lineno) from None

    values: dict = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            line = _line_of(text, key)
            if key not in SECTIONS:
                raise ConfigError(f"unknown key {key!r}", line, key)
            if SECTIONS[key] != section:
                raise ConfigError(f"key {key!r} belongs in section [{SECTIONS[key]}]", line, key)
            if key in values:
                raise ConfigError(f"duplicate key {key!r}", line, key)
            values[key] = _convert(key, raw, line)
    if "experiment" not in values:
        raise ConfigError("missing required key 'experiment'", key="experiment")
    cfg = ExperimentConfig(**values)
    try:
        return cfg.resolved()
    except ConfigError as exc:
        line = _line_of(text, exc.key) if exc.key else None
        if line is not None and exc.line is None:
            raise ConfigError(str(exc), line, exc.key) from None
        raise


def load_config(path) -> ExperimentConfig:
    """Read, default-fill and validate a configuration file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)
