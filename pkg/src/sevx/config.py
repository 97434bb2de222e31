"""Dotted-key run configuration: text files of ``key = value`` lines,
validated against a fixed schema with defaults. Unknown keys are fatal."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .features import SynthSpec
from .model import ModelSpec
from .se import SEConfig


class ConfigError(ValueError):
    """Bad key, bad value, or unparseable config text."""


def _positive(x) -> bool:
    return x > 0


def _nonneg(x) -> bool:
    return x >= 0


def _one_of(*choices):
    return lambda x: x in choices


def _stage_list(text: str) -> frozenset[int]:
    if not text.strip():
        return frozenset()
    try:
        stages = frozenset(int(s) for s in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"se.stages: expected a comma list of stage numbers, got {text!r}") from exc
    if not stages <= {1, 2, 3, 4}:
        raise ConfigError(f"se.stages must be within 1..4, got {sorted(stages)}")
    return stages


@dataclass(frozen=True)
class _Field:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] | None = None
    help: str = ""


def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _str(text: str) -> str:
    return text


SCHEMA: dict[str, _Field] = {
    "seed": _Field(_int, 1234),
    "out": _Field(_str, "runs/exp"),
    "model.scale_factor": _Field(_float, 1.0, _positive),
    "model.embedding_dim": _Field(_int, 256, _positive),
    "model.input_mel_bins": _Field(_int, 60, _positive),
    "model.segment_frames": _Field(_int, 400, _positive),
    "model.temporal_pooling": _Field(_str, "mean", _one_of("mean", "mean_std")),
    "se.pooling": _Field(_str, "mean_std", _one_of("max", "mean", "std", "mean_std")),
    "se.reduction": _Field(_int, 4, _positive),
    "se.hidden_layers": _Field(_int, 2, _positive),
    "se.integration": _Field(_str, "standard", _one_of("standard", "pre", "post", "identity")),
    "se.stages": _Field(_str, "1,2"),
    "optim.lr": _Field(_float, 0.2, _positive),
    "optim.momentum": _Field(_float, 0.9, _nonneg),
    "optim.weight_decay": _Field(_float, 2e-4, _nonneg),
    "optim.batch_size": _Field(_int, 32, _positive),
    "optim.epochs": _Field(_int, 30, _positive),
    "optim.lr_decay_milestones": _Field(_str, "0.5,0.75"),
    "optim.lr_decay_factor": _Field(_float, 0.1, _positive),
    "data.num_speakers": _Field(_int, 20, lambda x: x >= 2),
    "data.utts_per_speaker": _Field(_int, 50, _positive),
    "data.frames_per_utt": _Field(_int, 400, _positive),
    "data.signature_rank": _Field(_int, 3, _positive),
    "data.noise_level": _Field(_float, 0.1, _nonneg),
    "data.chunk_frames": _Field(_int, 400, _positive),
    "eval.p_target": _Field(_float, 0.01, lambda x: 0 < x < 1),
    "eval.c_miss": _Field(_float, 1.0, _positive),
    "eval.c_fa": _Field(_float, 1.0, _positive),
}


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings from ``key = value`` lines."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        raw[key.strip()] = value.strip()
    return raw


class RunConfig:
    """Fully-resolved configuration: every schema key has a typed value."""

    def __init__(self, overrides: dict[str, str] | None = None):
        overrides = dict(overrides or {})
        unknown = sorted(set(overrides) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        self.values: dict[str, Any] = {}
        for key, field in SCHEMA.items():
            if key in overrides:
                try:
                    value = field.parse(overrides[key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: cannot parse {overrides[key]!r}") from exc
            else:
                value = field.default
            if field.check is not None and not field.check(value):
                raise ConfigError(f"{key}: invalid value {value!r}")
            self.values[key] = value
        # cross-field validation that the schema cannot express per key
        _stage_list(self.values["se.stages"])
        self._parse_milestones()

    def _parse_milestones(self) -> tuple[float, ...]:
        text = self.values["optim.lr_decay_milestones"]
        try:
            ms = tuple(float(v) for v in text.split(",") if v.strip())
        except ValueError as exc:
            raise ConfigError(f"optim.lr_decay_milestones: bad value {text!r}") from exc
        if any(not 0 < m < 1 for m in ms):
            raise ConfigError("optim.lr_decay_milestones must lie in (0, 1)")
        return ms

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls(parse_config_text(f.read()))

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, **kv: str) -> "RunConfig":
        merged = {k: str(v) for k, v in self.as_text_dict().items()}
        merged.update({k: str(v) for k, v in kv.items()})
        return RunConfig(merged)

    def as_text_dict(self) -> dict[str, str]:
        return {k: str(v) for k, v in self.values.items()}

    def render(self) -> str:
        """Canonical text form, written as the frozen copy of every run."""
        return "".join(f"{k} = {v}\n" for k, v in sorted(self.as_text_dict().items()))

    # ---- typed views ------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.values["seed"]

    @property
    def out_dir(self) -> str:
        return self.values["out"]

    def model_spec(self, num_speakers: int | None = None) -> ModelSpec:
        return ModelSpec(
            input_mel_bins=self.values["model.input_mel_bins"],
            segment_frames=self.values["model.segment_frames"],
            embedding_dim=self.values["model.embedding_dim"],
            num_speakers=num_speakers if num_speakers is not None else self.values["data.num_speakers"],
            scale_factor=self.values["model.scale_factor"],
            temporal_pooling=self.values["model.temporal_pooling"],
        )

    def se_config(self) -> SEConfig:
        return SEConfig(
            pooling=self.values["se.pooling"],
            reduction_factor=self.values["se.reduction"],
            hidden_layers=self.values["se.hidden_layers"],
            integration=self.values["se.integration"],
            stages=_stage_list(self.values["se.stages"]),
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            num_speakers=self.values["data.num_speakers"],
            utts_per_speaker=self.values["data.utts_per_speaker"],
            frames_per_utt=self.values["data.frames_per_utt"],
            speaker_signature_rank=self.values["data.signature_rank"],
            noise_level=self.values["data.noise_level"],
            seed=self.seed,
        )

    def lr_milestones(self) -> tuple[float, ...]:
        return self._parse_milestones()
