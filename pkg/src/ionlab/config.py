"""Flat ``key = value`` experiment config files.

One setting per line, ``#`` starts a comment. Keys are dotted ``section.field``:

    variant = ion                 # start from a named ablation variant (optional)
    model.context = irnn          # any ModelConfig field
    model.sources = conv3:4, conv4:8, conv5:16, context:16
    model.backbone_channels = 12, 16, 24, 32, 32
    data.noise = 0.12             # any DataConfig field
    budget.iters = 800            # any ToyBudget scalar (sizes, seeds, schedule)
    train.momentum = 0.9          # TrainConfig overrides
    train.stages = conv1+conv2+conv3+conv4+conv5 | 400 | 5e-3 | 1e-4 ; conv1+conv2 | 400 | 1e-3 | 1e-5

Values are parsed with the field's annotated type; unknown keys, malformed
values and repeated keys are errors reported with their line number.
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import DataConfig
from .experiments import VARIANTS, ToyBudget, variant_config
from .model import ModelConfig
from .train import Stage, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_sources(text: str) -> tuple:
    """``conv3:4, conv5:16`` -> ``(("conv3", 4), ("conv5", 16))``."""
    out = []
    for item in text.split(","):
        name, sep, stride = item.strip().partition(":")
        if not sep or not name:
            raise ValueError(f"source {item.strip()!r} is not name:stride")
        out.append((name.strip(), int(stride)))
    if not out:
        raise ValueError("empty source list")
    return tuple(out)


def parse_stages(text: str) -> tuple:
    """``frozen | iters | lr_start | lr_end`` entries separated by ``;``; frozen is ``a+b`` or ``-``."""
    stages = []
    for chunk in text.split(";"):
        parts = [p.strip() for p in chunk.split("|")]
        if len(parts) != 4:
            raise ValueError(f"stage {chunk.strip()!r} needs 'frozen | iters | lr_start | lr_end'")
        frozen = () if parts[0] in ("", "-") else tuple(p.strip() for p in parts[0].split("+"))
        stages.append(Stage(frozen, int(parts[1]), float(parts[2]), float(parts[3])))
    return tuple(stages)


def format_sources(sources) -> str:
    return ", ".join(f"{n}:{s}" for n, s in sources)


def format_stages(stages) -> str:
    return " ; ".join(
        f"{'+'.join(st.frozen) or '-'} | {st.iters} | {st.lr_start!r} | {st.lr_end!r}" for st in stages
    )


SPECIAL = {
    "model.sources": (parse_sources, format_sources),
    "train.stages": (parse_stages, format_stages),
}


def _scalar(tp, text: str):
    if tp is bool:
        return parse_bool(text)
    if tp in (int, float, str):
        return tp(text.strip())
    raise TypeError(f"unsupported field type {tp!r}")


def parse_value(tp, text: str):
    """Parse ``text`` as annotation ``tp`` (scalars, ``X | None``, homogeneous tuples)."""
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.strip().lower() in ("none", ""):
            return None
        return parse_value(args[0], text)
    if tp is tuple or origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        vals = []
        for t in items:
            try:
                vals.append(int(t))
            except ValueError:
                vals.append(float(t))
        return tuple(vals)
    return _scalar(tp, text)


def _fields(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if f.init}


BUDGET_SKIP = {"data"}
TRAIN_FIELDS = {"clip_norm_single", "clip_norm_accum", "clip_mode", "momentum", "fg_fraction", "fg_thresh",
                "bg_thresh_lo", "stages", "log_every"}


@dataclass
class ExperimentConfig:
    variant: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    budget: ToyBudget = field(default_factory=ToyBudget)
    train_overrides: dict = field(default_factory=dict)

    def train_config(self) -> TrainConfig:
        return replace(self.budget.train_config(), **self.train_overrides)

    def to_text(self) -> str:
        lines = []
        if self.variant:
            lines.append(f"variant = {self.variant}")
        for section, obj in (("model", self.model), ("data", self.budget.data), ("budget", self.budget)):
            for name in _fields(type(obj)):
                if section == "budget" and name in BUDGET_SKIP:
                    continue
                lines.append(f"{section}.{name} = {_format(f'{section}.{name}', getattr(obj, name))}")
        for name, v in sorted(self.train_overrides.items()):
            lines.append(f"train.{name} = {_format(f'train.{name}', v)}")
        return "\n".join(lines) + "\n"


def _format(key: str, value) -> str:
    if key in SPECIAL:
        return SPECIAL[key][1](value)
    if isinstance(value, tuple):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        if key in entries:
            raise ConfigError(f"key {key!r} repeated (first on line {entries[key][0]})", lineno, source)
        entries[key] = (lineno, value.strip())

    variant = None
    if "variant" in entries:
        lineno, variant = entries.pop("variant")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}", lineno, source)

    sections = {
        "model": _fields(ModelConfig),
        "data": _fields(DataConfig),
        "budget": {k: v for k, v in _fields(ToyBudget).items() if k not in BUDGET_SKIP},
        "train": {k: v for k, v in _fields(TrainConfig).items() if k in TRAIN_FIELDS},
    }
    parsed = {s: {} for s in sections}
    for key, (lineno, value) in entries.items():
        section, _, name = key.partition(".")
        if section not in sections or name not in sections[section]:
            raise ConfigError(f"unknown key {key!r}", lineno, source)
        try:
            if key in SPECIAL:
                parsed[section][name] = SPECIAL[key][0](value)
            else:
                parsed[section][name] = parse_value(sections[section][name], value)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key!r}: {e}", lineno, source) from None

    try:
        model = variant_config(variant, **parsed["model"]) if variant else ModelConfig(**parsed["model"])
        data = DataConfig(**parsed["data"])
        budget = ToyBudget(**parsed["budget"], data=data)
        cfg = ExperimentConfig(variant, model, budget, parsed["train"])
        cfg.train_config()  # validates the overrides
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e), None, source) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), str(path))
