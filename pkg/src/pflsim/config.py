"""RunConfig: one INI-style file with sections, plus dotted-key overrides."""
from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import SynthSpec
from .losses import LossWeights
from .model import ConfigError, ModelConfig

ABLATION_MODES = ("none", "as1", "as2", "as3", "as4")


@dataclass(frozen=True)
class Ablation:
    no_prompt: bool = False
    no_communication: bool = False
    no_image_prompt: bool = False
    no_text_prompt: bool = False

    @classmethod
    def from_mode(cls, mode: str) -> "Ablation":
        mode = mode.lower()
        table = {
            "none": cls(),
            "pm": cls(),
            "as1": cls(no_prompt=True, no_communication=True),
            "as2": cls(no_communication=True),
            "as3": cls(no_image_prompt=True),
            "as4": cls(no_text_prompt=True),
        }
        aliases = {"no_prompt": "as1", "no_communication": "as2", "no_image_prompt": "as3", "no_text_prompt": "as4"}
        mode = aliases.get(mode, mode)
        if mode not in table:
            raise ConfigError(f"unknown ablation {mode!r}; expected one of {', '.join(ABLATION_MODES)}")
        return table[mode]

    @property
    def mode(self) -> str:
        for name in ABLATION_MODES:
            if Ablation.from_mode(name) == self:
                return "pm" if name == "none" else name
        return "custom"

    def prompted_towers(self) -> tuple[str, ...]:
        if self.no_prompt:
            return ()
        out = []
        if not self.no_image_prompt:
            out.append("image")
        if not self.no_text_prompt:
            out.append("text")
        return tuple(out)

    @property
    def communicates(self) -> bool:
        return not self.no_communication and bool(self.prompted_towers())


@dataclass(frozen=True)
class Schedule:
    global_epochs: int = 30
    local_epochs: int = 5
    lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 10
    batch_size: int = 32

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based global epoch ``epoch``."""
        return self.lr * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # synth | jsonl
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: tuple[str, ...] = ()
    split_ratios: tuple[float, ...] = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    schedule: Schedule = field(default_factory=Schedule)
    ablation: Ablation = field(default_factory=Ablation)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    output_dir: str = "runs/latest"

    @property
    def n_clients(self) -> int:
        return len(self.data.paths) if self.data.source == "jsonl" else self.data.synth.n_clients

    def validate(self, check_paths: bool = True) -> "RunConfig":
        m = self.model
        try:
            m.validate()
        except ConfigError as exc:
            raise ConfigError(f"[model] {exc}") from exc
        s = self.schedule
        for key in ("global_epochs", "local_epochs", "batch_size", "lr_decay_every"):
            if getattr(s, key) < 1:
                raise ConfigError(f"schedule.{key} must be >= 1, got {getattr(s, key)}")
        if not s.lr >= 0:
            raise ConfigError(f"schedule.lr must be >= 0, got {s.lr}")
        if self.data.source == "synth":
            spec = self.data.synth
            try:
                spec.validate()
            except ConfigError as exc:
                raise ConfigError(f"[data] {exc}") from exc
            for mkey, dkey in (("image_vocab", "image_vocab"), ("text_vocab", "text_vocab"),
                               ("image_len", "n_attrs"), ("question_len", "question_len")):
                if getattr(m, mkey) < getattr(spec, dkey):
                    raise ConfigError(f"model.{mkey}={getattr(m, mkey)} < data.{dkey}={getattr(spec, dkey)}")
        elif self.data.source == "jsonl":
            if not self.data.paths:
                raise ConfigError("data.paths is empty for source = jsonl")
            if check_paths:
                for p in self.data.paths:
                    if not Path(p).is_file():
                        raise ConfigError(f"data.paths: {p} does not exist")
        else:
            raise ConfigError(f"data.source must be synth or jsonl, got {self.data.source!r}")
        if self.n_clients < 1:
            raise ConfigError("need at least one client")
        if self.ablation.communicates and self.n_clients < 2:
            raise ConfigError("communication needs at least 2 clients (set ablation.no_communication)")
        return self


# ---------------------------------------------------------------------------
# text form


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, like: Any, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            items = [x.strip() for x in text.split(",") if x.strip()]
            elem = like[0] if like else ""
            return tuple(_parse(x, elem, key) for x in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from exc


# section -> (attribute path on RunConfig, defaults instance)
def _sections(cfg: RunConfig) -> dict[str, Any]:
    return {
        "model": cfg.model,
        "losses": cfg.losses,
        "schedule": cfg.schedule,
        "ablation": cfg.ablation,
        "data": cfg.data,
        "synth": cfg.data.synth,
    }


_TUPLE_ELEM = {("synth", "sizes"): 0, ("synth", "split_ratios"): 0.0,
               ("data", "split_ratios"): 0.0, ("data", "paths"): ""}


def to_text(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"seed": _fmt(cfg.seed), "output_dir": cfg.output_dir}
    for name, obj in _sections(cfg).items():
        cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj) if f.name != "synth"}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _coerce(section: str, obj: Any, key: str, raw: str) -> Any:
    names = {f.name for f in fields(obj)}
    if key not in names or key == "synth":
        raise ConfigError(f"unknown config key {section}.{key}")
    like = getattr(obj, key)
    if isinstance(like, tuple):
        elem = _TUPLE_ELEM.get((section, key), like[0] if like else "")
        like = (elem,)
    return _parse(raw, like, f"{section}.{key}")


def apply_overrides(cfg: RunConfig, values: dict[str, dict[str, str]]) -> RunConfig:
    """Apply ``{section: {key: text}}`` on top of ``cfg``."""
    run = dict(values.get("run", {}))
    secs = _sections(cfg)
    updated: dict[str, Any] = {}
    for section, kv in values.items():
        if section == "run":
            continue
        if section not in secs:
            raise ConfigError(f"unknown config section [{section}]")
        obj = secs[section]
        changes = {k: _coerce(section, obj, k, v) for k, v in kv.items()}
        try:
            updated[section] = replace(obj, **changes)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    synth = updated.pop("synth", cfg.data.synth)
    data = updated.pop("data", cfg.data)
    data = replace(data, synth=synth)
    seed = cfg.seed
    out = cfg.output_dir
    for k, v in run.items():
        if k == "seed":
            seed = _parse(v, 0, "run.seed")
        elif k == "output_dir":
            out = v.strip()
        else:
            raise ConfigError(f"unknown config key run.{k}")
    return replace(cfg, data=data, seed=seed, output_dir=out, **updated)


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    values = {s: dict(cp[s]) for s in cp.sections()}
    return apply_overrides(base or default_config(), values)


def load(path: str | Path) -> RunConfig:
    return from_text(Path(path).read_text())


def parse_override(item: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value)."""
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    lhs, value = item.split("=", 1)
    section, key = lhs.split(".", 1)
    return section.strip(), key.strip(), value


def default_config() -> RunConfig:
    """Benchmark preset: reference hyperparameters at D=64, r=4 with a tuned generator.

    Dataclass defaults keep the reference values (I_L=5, init std 0.02); this
    preset trades local epochs and init scale for a minutes-scale run.
    """
    synth = SynthSpec(n_values=3, question_len=1, label_concentration=3.0)
    return RunConfig(
        model=ModelConfig(blocks=4, prompt_len=4, width=64, heads=4, ffn_mult=2,
                          embed_std=0.5, init_std=0.6, prompt_std=0.02),
        losses=LossWeights(alpha=0.5, beta=0.001),
        schedule=Schedule(local_epochs=2),
        data=DataConfig(synth=synth),
    )


def smoke_config() -> RunConfig:
    cfg = default_config()
    return replace(
        cfg,
        model=replace(cfg.model, blocks=2, width=16, heads=2, head_hidden=32),
        schedule=replace(cfg.schedule, global_epochs=1, local_epochs=1),
        data=replace(cfg.data, synth=replace(cfg.data.synth, sizes=(60, 40))),
    )
