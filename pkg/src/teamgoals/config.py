"""Run configuration shared by the command-line tools.

A config file is a JSON object with any of the :class:`RunConfig` fields;
the ``lm`` entry holds the external language model endpoint. Command-line
flags override file values. Credentials are never read from the file.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .inference import InferenceConfig
from .lm_client import ExternalLMScorer, LMEndpoint
from .planner import DEFAULT_BUDGET, HEURISTICS, PlannerConfig
from .utterance import BACKENDS, UtteranceModelConfig, load_default_examples


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    temperature: float = 1.0
    p_communicate: float = 0.95
    backend: str = "template"
    seed: int = 0
    jobs: int = 1
    cache_dir: str | None = None
    heuristic: str = "manhattan"
    budget: int = DEFAULT_BUDGET
    lm: LMEndpoint | None = field(default=None)

    def __post_init__(self):
        if not self.temperature >= 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.p_communicate < 1:
            raise ConfigError("p_communicate must lie in (0, 1)")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.backend == "external-lm" and self.lm is None:
            raise ConfigError("the external-lm backend needs an 'lm' endpoint in the config file")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.budget < 1:
            raise ConfigError("budget must be >= 1")
        if self.heuristic not in HEURISTICS:
            raise ConfigError(f"heuristic must be one of {HEURISTICS}")

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if data.get("lm") is not None:
            try:
                data["lm"] = LMEndpoint.from_dict(data["lm"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad lm endpoint: {exc}") from None
        return cls(**data)

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def override(self, **changes) -> RunConfig:
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.lm is not None:
            out["lm"] = asdict(self.lm)
        return out

    def inference_config(self, temperature: float | None = None) -> InferenceConfig:
        T = self.temperature if temperature is None else temperature
        return InferenceConfig(
            PlannerConfig(T, self.budget, self.heuristic),
            UtteranceModelConfig(self.p_communicate, load_default_examples(), self.backend),
        )

    def make_scorer(self):
        """The utterance scorer for this config; ``None`` selects the template backend."""
        if self.backend == "template":
            return None
        return ExternalLMScorer(self.lm, load_default_examples(), self.cache_dir)
