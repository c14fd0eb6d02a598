"""Run configuration: dataclasses plus an INI reader with line-anchored errors.

A config file has these sections (all optional except at least one device)::

    [run]        name, seed, mode (async | sync | accounting)
    [task]       vocab, num_classes, seq, signal, subset_size, train_samples, eval_samples
    [partition]  alpha
    [train]      lr, batch, rank, standalone_epochs, k_arrival, replay_budget, weight_decay
    [alignment]  d_side, block_count, strategy, taps.<backbone> = 1,2,3
    [server]     tflops, eval_interval, target_accuracy, spill_threshold
    [backbone.<id>]  num_layers, hidden, heads, ffn_mult, vocab, max_seq, num_classes, init_seed
    [device.<name>]  backbone, tflops, bandwidth_mbps, count
    [accounting] backbone, seq, batch, rank, rounds, local_epochs, num_clients,
                 dataset_size, perturbations, lora_targets, wire_bytes, param_bytes, act_bytes

Client ids are assigned in device-section order, ``count`` clients per section.
"""

from __future__ import annotations

import configparser
import dataclasses
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig
from .data import SyntheticTask
from .errors import ConfigError

MODES = ("async", "sync", "accounting")
LORA_TARGETS = ("q", "k", "v", "o", "ffn1", "ffn2")


def derive_seed(root: int, label: str) -> int:
    """Independent sub-seed for one labelled component of a run."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(label.encode())]).generate_state(1)[0])


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    tflops: float
    bandwidth_mbps: float
    backbone_id: str

    def validate(self) -> None:
        if not (self.tflops > 0 and self.bandwidth_mbps > 0):
            raise ConfigError(f"device {self.name!r}: tflops and bandwidth_mbps must be > 0")

    def compute_time(self, flops: float) -> float:
        return flops / (self.tflops * 1e12)

    def upload_time(self, nbytes: int) -> float:
        return nbytes * 8.0 / (self.bandwidth_mbps * 1e6)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch: int = 8
    rank: int = 4
    standalone_epochs: int = 20
    k_arrival: int = 1
    replay_budget: int = 8
    weight_decay: float = 0.0


@dataclass(frozen=True)
class AlignmentConfig:
    d_side: int | str = "auto"
    block_count: int | None = None
    strategy: str = "uniform"
    taps: dict[str, tuple[int, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class ServerConfig:
    tflops: float | None = None  # default: 100x the fastest client
    eval_interval: float | None = None  # default: longest client timeline / 100
    target_accuracy: float = 0.85
    spill_threshold: int | None = None


@dataclass(frozen=True)
class AccountingConfig:
    backbone: str | None = None  # default: first defined backbone
    seq: int = 256
    batch: int = 8
    rank: int = 64
    rounds: int = 100
    local_epochs: int = 1
    num_clients: int = 100
    dataset_size: int = 3668
    perturbations: int = 300
    lora_targets: tuple[str, ...] = LORA_TARGETS
    wire_bytes: int = 2
    param_bytes: int = 2
    act_bytes: int = 2


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    seed: int = 0
    mode: str = "async"
    task: SyntheticTask = SyntheticTask()
    train_samples: int = 480
    eval_samples: int = 400
    alpha: float = 1.0
    train: TrainConfig = TrainConfig()
    alignment: AlignmentConfig = AlignmentConfig()
    server: ServerConfig = ServerConfig()
    backbones: dict[str, BackboneConfig] = field(default_factory=dict)
    devices: tuple[DeviceProfile, ...] = ()
    accounting: AccountingConfig = AccountingConfig()

    @property
    def num_clients(self) -> int:
        return len(self.devices)

    def seed_for(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def resolved_task(self) -> SyntheticTask:
        return dataclasses.replace(self.task, seed=self.seed_for("task"))

    def used_backbones(self) -> list[BackboneConfig]:
        seen = dict.fromkeys(d.backbone_id for d in self.devices)
        return [self.backbones[b] for b in seen]

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.task.validate()
        for b in self.backbones.values():
            b.validate()
            if b.num_classes != self.task.num_classes:
                raise ConfigError(f"backbone {b.id!r} has {b.num_classes} classes, task has "
                                  f"{self.task.num_classes}")
            if b.vocab < self.task.vocab:
                raise ConfigError(f"backbone {b.id!r} vocab {b.vocab} < task vocab {self.task.vocab}")
            if b.max_seq < self.task.seq:
                raise ConfigError(f"backbone {b.id!r} max_seq {b.max_seq} < task seq {self.task.seq}")
        if self.mode != "accounting":
            if not self.devices:
                raise ConfigError("no [device.*] sections")
            if self.train_samples < self.num_clients:
                raise ConfigError(f"{self.train_samples} samples cannot cover {self.num_clients} clients")
        for d in self.devices:
            d.validate()
            if d.backbone_id not in self.backbones:
                raise ConfigError(f"device {d.name!r} references undefined backbone {d.backbone_id!r}")
        t = self.train
        if t.lr <= 0 or t.batch < 1 or t.rank < 1 or t.k_arrival < 0 or t.replay_budget < 0:
            raise ConfigError("train: lr > 0, batch >= 1, rank >= 1, k_arrival >= 0, replay_budget >= 0")
        if t.standalone_epochs < 0:
            raise ConfigError("train: standalone_epochs must be >= 0")
        if not self.alpha > 0:
            raise ConfigError(f"partition alpha must be > 0, got {self.alpha}")
        a = self.accounting
        if a.backbone is not None and a.backbone not in self.backbones:
            raise ConfigError(f"accounting backbone {a.backbone!r} is not defined")
        for target in a.lora_targets:
            if target not in LORA_TARGETS:
                raise ConfigError(f"unknown lora target {target!r}; choose from {LORA_TARGETS}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["task"]["seed"] = self.resolved_task().seed
        d["alignment"]["taps"] = {k: list(v) for k, v in self.alignment.taps.items()}
        d["devices"] = [dataclasses.asdict(x) for x in self.devices]
        d["accounting"]["lora_targets"] = list(self.accounting.lora_targets)
        return d


# ------------------------------------------------------------------ parsing

_SECTION_KEYS = {
    "run": {"name", "seed", "mode"},
    "task": {"vocab", "num_classes", "seq", "signal", "subset_size", "train_samples", "eval_samples"},
    "partition": {"alpha"},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "alignment": {"d_side", "block_count", "strategy"},
    "server": {f.name for f in dataclasses.fields(ServerConfig)},
    "accounting": {f.name for f in dataclasses.fields(AccountingConfig)},
}
_BACKBONE_KEYS = {f.name for f in dataclasses.fields(BackboneConfig)} - {"id"}
_DEVICE_KEYS = {"backbone", "tflops", "bandwidth_mbps", "count"}


class _Source:
    """Finds the line of a section header or key in the raw config text."""

    def __init__(self, text: str, path: str | None):
        self.lines = text.splitlines()
        self.path = path

    def locate(self, section: str, key: str | None = None) -> int | None:
        in_section = False
        head = None
        for no, raw in enumerate(self.lines, 1):
            line = raw.strip()
            m = re.match(r"\[(.+)\]$", line)
            if m:
                in_section = m.group(1).strip() == section
                if in_section:
                    head = no
                continue
            if in_section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", line, re.I):
                return no
        return head

    def error(self, message: str, section: str, key: str | None = None) -> ConfigError:
        return ConfigError(message, self.locate(section, key), self.path)


def _convert(src: _Source, section: str, key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError:
        raise src.error(f"[{section}] {key} = {raw!r} is not a valid {kind.__name__}", section, key) from None


def _optional(src, section, key, raw, kind):
    if raw is None or raw.strip().lower() in ("", "none", "auto"):
        return None
    return _convert(src, section, key, raw, kind)


def _int_list(src, section, key, raw) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in re.split(r"[,\s]+", raw.strip()) if x)
    except ValueError:
        raise src.error(f"[{section}] {key} must be a comma-separated list of ints", section, key) from None


def loads_config(text: str, path: str | None = None) -> RunConfig:
    src = _Source(text, path)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=path or "<config>")
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line, path) from None

    backbones: dict[str, BackboneConfig] = {}
    devices: list[DeviceProfile] = []
    sections: dict[str, dict[str, str]] = {}
    for name in cp.sections():
        items = dict(cp[name])
        if name.startswith("backbone."):
            bid = name.split(".", 1)[1]
            _check_keys(src, name, items, _BACKBONE_KEYS)
            kw = {k: _convert(src, name, k, v, int) for k, v in items.items()}
            backbones[bid] = BackboneConfig(id=bid, **kw)
        elif name.startswith("device."):
            _check_keys(src, name, items, _DEVICE_KEYS)
            if "backbone" not in items:
                raise src.error(f"[{name}] needs a backbone", name)
            count = _convert(src, name, "count", items.get("count", "1"), int)
            if count < 0:
                raise src.error(f"[{name}] count must be >= 0", name, "count")
            prof = DeviceProfile(name.split(".", 1)[1],
                                 _convert(src, name, "tflops", items.get("tflops", "0.01"), float),
                                 _convert(src, name, "bandwidth_mbps", items.get("bandwidth_mbps", "60"), float),
                                 items["backbone"].strip())
            if not (prof.tflops > 0 and prof.bandwidth_mbps > 0):
                raise src.error(f"[{name}] tflops and bandwidth_mbps must be > 0", name)
            if not cp.has_section(f"backbone.{prof.backbone_id}"):
                raise src.error(f"[{name}] references undefined backbone {prof.backbone_id!r}", name, "backbone")
            devices.extend([prof] * count)
        elif name in _SECTION_KEYS:
            _check_keys(src, name, items, _SECTION_KEYS[name],
                        allow_prefix="taps." if name == "alignment" else None)
            sections[name] = items
        else:
            raise src.error(f"unknown section [{name}]", name)

    def get(section, key, kind, default):
        raw = sections.get(section, {}).get(key)
        return default if raw is None else _convert(src, section, key, raw, kind)

    run = sections.get("run", {})
    mode = run.get("mode", "async").strip()
    if mode not in MODES:
        raise src.error(f"[run] mode must be one of {MODES}, got {mode!r}", "run", "mode")

    task_kw = {k: get("task", k, int, getattr(SyntheticTask, k)) for k in ("vocab", "num_classes", "seq")}
    task = SyntheticTask(**task_kw, signal=get("task", "signal", float, SyntheticTask.signal),
                         subset_size=_optional(src, "task", "subset_size",
                                               sections.get("task", {}).get("subset_size"), int))

    tr = TrainConfig(**{f.name: get("train", f.name, type(f.default), f.default)
                        for f in dataclasses.fields(TrainConfig)})

    al = sections.get("alignment", {})
    d_side = al.get("d_side", "auto").strip()
    if d_side != "auto":
        d_side = _convert(src, "alignment", "d_side", d_side, int)
    taps = {k.split(".", 1)[1]: _int_list(src, "alignment", k, v)
            for k, v in al.items() if k.startswith("taps.")}
    for bid in taps:
        if bid not in backbones:
            raise src.error(f"[alignment] taps for undefined backbone {bid!r}", "alignment", f"taps.{bid}")
    strategy = al.get("strategy", "uniform").strip()
    if strategy not in ("uniform", "shallow", "deep"):
        raise src.error(f"[alignment] strategy must be uniform/shallow/deep, got {strategy!r}",
                        "alignment", "strategy")
    align = AlignmentConfig(d_side, _optional(src, "alignment", "block_count", al.get("block_count"), int),
                            strategy, taps)

    sv = sections.get("server", {})
    server = ServerConfig(_optional(src, "server", "tflops", sv.get("tflops"), float),
                          _optional(src, "server", "eval_interval", sv.get("eval_interval"), float),
                          get("server", "target_accuracy", float, ServerConfig.target_accuracy),
                          _optional(src, "server", "spill_threshold", sv.get("spill_threshold"), int))

    ac = sections.get("accounting", {})
    acc_kw = {}
    for f in dataclasses.fields(AccountingConfig):
        if f.name not in ac:
            continue
        if f.name == "backbone":
            acc_kw[f.name] = ac[f.name].strip()
        elif f.name == "lora_targets":
            acc_kw[f.name] = tuple(x for x in re.split(r"[,\s]+", ac[f.name].strip()) if x)
        else:
            acc_kw[f.name] = _convert(src, "accounting", f.name, ac[f.name], int)
    accounting = AccountingConfig(**acc_kw)

    cfg = RunConfig(
        name=run.get("name", Path(path).stem if path else "run").strip(),
        seed=get("run", "seed", int, 0),
        mode=mode,
        task=task,
        train_samples=get("task", "train_samples", int, RunConfig.train_samples),
        eval_samples=get("task", "eval_samples", int, RunConfig.eval_samples),
        alpha=get("partition", "alpha", float, RunConfig.alpha),
        train=tr,
        alignment=align,
        server=server,
        backbones=backbones,
        devices=tuple(devices),
        accounting=accounting,
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), None, path) from None
    except ValueError as exc:
        raise ConfigError(str(exc), None, path) from None
    return cfg


def _check_keys(src: _Source, section: str, items: dict, allowed: set, allow_prefix: str | None = None):
    for key in items:
        if key in allowed or (allow_prefix and key.startswith(allow_prefix)):
            continue
        raise src.error(f"[{section}] unknown key {key!r}", section, key)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(p)) from None
    return loads_config(text, str(p))
