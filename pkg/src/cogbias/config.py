"""Run configuration: one YAML file holding generator, model, split and training settings."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from .domain import SplitSpec
from .han import ModelConfig
from .pipeline import PipelineConfig
from .synthgen import GeneratorConfig

# Hyperparameters with a published value differing from the desk-scale default.
PUBLISHED_VALUES = {
    "model.action_hidden": "512",
    "model.visit_hidden": "2048",
    "model.decoder_hidden": "2048",
    "model.dropout_p": "0.2",
    "model.m": "6 (4 and 8 in the window-size comparison)",
    "model.n": "21 (focal action +/- 10)",
    "model.vocab_size": "33 action categories",
    "training.lr": "1e-3 (Adam)",
    "training.batch_size": "40",
    "training.common_epochs": "over 25, until convergence",
    "split.common_frac": "0.20",
    "split.personalized_frac": "0.50",
    "split.extended_frac": "0.30",
    "training.alpha": "0.05",
    "training.min_visits": "10",
    "training.max_visits": "82",
}

_PIPELINE_SKIP = {"model", "split"}


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    @property
    def model(self) -> ModelConfig:
        return self.pipeline.model

    def to_dict(self) -> dict:
        p = self.pipeline
        return {
            "generator": dataclasses.asdict(self.generator),
            "model": dataclasses.asdict(p.model),
            "split": dataclasses.asdict(p.split),
            "training": {f.name: getattr(p, f.name) for f in fields(p) if f.name not in _PIPELINE_SKIP},
        }

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        unknown = set(data) - {"generator", "model", "split", "training"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        gen = _build(GeneratorConfig, data.get("generator"), "generator")
        model = _build(ModelConfig, data.get("model"), "model")
        split_d = dict(data.get("split") or {})
        split = _build(SplitSpec, {k: float(v) for k, v in split_d.items()}, "split")
        training = dict(data.get("training") or {})
        pipe = _build(PipelineConfig, training, "training", skip=_PIPELINE_SKIP)
        return cls(gen, replace(pipe, model=model, split=split))


def _build(klass, values: dict | None, section: str, skip=frozenset()):
    values = dict(values or {})
    names = {f.name for f in fields(klass)} - set(skip)
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown keys in {section}: {sorted(unknown)}")
    return klass(**values)


def to_yaml(cfg: RunConfig) -> str:
    """YAML text with the published value noted next to each hyperparameter."""
    lines = ["# cogbias run configuration (desk-scale defaults)", ""]
    for section, values in cfg.to_dict().items():
        lines.append(f"{section}:")
        for key, value in values.items():
            text = f"  {key}: {yaml.safe_dump(value, default_flow_style=True).strip().removesuffix('...').strip()}"
            note = PUBLISHED_VALUES.get(f"{section}.{key}")
            if note:
                text += f"  # published: {note}"
            lines.append(text)
        lines.append("")
    return "\n".join(lines)


def load(path) -> RunConfig:
    with Path(path).open() as fh:
        return RunConfig.from_dict(yaml.safe_load(fh))


def dump(cfg: RunConfig, path) -> None:
    Path(path).write_text(to_yaml(cfg))
