"""Run configuration: one TOML document with ``version`` plus sections
``schedule``, ``arch``, ``train``, ``sampler``, ``data`` and ``paths``."""
from __future__ import annotations

from dataclasses import dataclass, field, fields

try:
    import tomllib as tomli
except ImportError:  # Python < 3.11
    import tomli

from .datasets import DatasetSpec
from .network import ArchConfig
from .objective import TrainConfig
from .sampler import SamplerConfig
from .schedule import ScheduleConfig

CONFIG_VERSION = 1
ARCH_KEYS = {"hidden", "depth", "mode", "rate_mode"}
PATH_KEYS = {"data", "checkpoint", "metrics", "samples", "traces"}
DATA_KEYS = {"kind", "size", "seed", "params"}
SECTIONS = {"schedule", "arch", "train", "sampler", "data", "paths"}


class ConfigError(ValueError):
    pass


def _keys(cls):
    return {f.name for f in fields(cls)}


def _check(section, got, allowed):
    unknown = set(got) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")


@dataclass
class RunConfig:
    schedule: ScheduleConfig
    arch: ArchConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DatasetSpec | None = None
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "version" not in doc:
            raise ConfigError("config lacks the required 'version' field")
        if doc.pop("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version; expected {CONFIG_VERSION}")
        _check("top level", doc, SECTIONS)
        try:
            sched = doc.get("schedule", {})
            schedule = ScheduleConfig.from_dict(sched)
            arch_doc = doc.get("arch", {})
            _check("arch", arch_doc, ARCH_KEYS)
            arch = ArchConfig(N=schedule.N, d=schedule.d, T=schedule.T, **arch_doc)
            train_doc = doc.get("train", {})
            _check("train", train_doc, _keys(TrainConfig))
            sampler_doc = doc.get("sampler", {})
            _check("sampler", sampler_doc, _keys(SamplerConfig))
            data = None
            if "data" in doc:
                _check("data", doc["data"], DATA_KEYS)
                data = DatasetSpec(**doc["data"])
            paths = doc.get("paths", {})
            _check("paths", paths, PATH_KEYS)
            return cls(schedule, arch, TrainConfig(**train_doc), SamplerConfig(**sampler_doc), data, dict(paths))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_toml(cls, text):
        try:
            doc = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            raw = fh.read()
        return cls.from_toml(raw.decode("utf-8"))


def load_section(path, section, allowed):
    """Read one optional section of a config file, checking the version."""
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"malformed TOML: {exc}") from None
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError("config lacks a supported 'version' field")
    _check("top level", set(doc) - {"version"}, SECTIONS)
    got = doc.get(section, {})
    _check(section, got, allowed)
    return got
