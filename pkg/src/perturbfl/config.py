"""Run configuration: one JSON file shared by plain and perturbed runs."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import UsageError
from .perturbation import NoiseConfig

MODES = ("plain", "perturbed")


@dataclass
class TransportConfig:
    kind: str = "inproc"  # inproc | tcp
    host: str = "127.0.0.1"
    port: int = 0
    timeout_s: float = 30.0
    max_frame: int = 64 * 1024 * 1024

    def __post_init__(self):
        if self.kind not in ("inproc", "tcp"):
            raise UsageError(f"unknown transport kind {self.kind!r}")
        if self.timeout_s <= 0:
            raise UsageError("transport timeout must be positive")


@dataclass
class BatchConfig:
    policy: str = "full"  # full | minibatch
    size: int | None = None

    def __post_init__(self):
        if self.policy not in ("full", "minibatch"):
            raise UsageError(f"unknown batch policy {self.policy!r}")
        if self.policy == "minibatch" and (self.size is None or self.size < 1):
            raise UsageError("minibatch policy needs a positive size")


@dataclass
class RunConfig:
    dataset: dict
    hidden: list[int]
    mode: str = "perturbed"
    clients: int = 1
    rounds: int = 10
    lr: float = 0.1
    seed: int = 0
    m: int | None = None
    init_std: float = 0.01
    split: list[float] = field(default_factory=lambda: [0.8, 0.1, 0.1])
    batch: BatchConfig = field(default_factory=BatchConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    metrics_csv: str | None = None
    manifest: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clients < 1:
            raise UsageError("need at least one client")
        if self.rounds < 0:
            raise UsageError("rounds must be >= 0")
        if not self.lr > 0:
            raise UsageError("learning rate must be positive")
        if not self.hidden or any(int(h) < 1 for h in self.hidden):
            raise UsageError("hidden must list at least one positive layer width")
        if self.m is not None and self.m < 1:
            raise UsageError("m must be >= 1")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or self.split[0] <= 0:
            raise UsageError("split must be three non-negative fractions with a positive train share")
        if "kind" not in self.dataset:
            raise UsageError("dataset entry needs a 'kind'")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        d = copy.deepcopy(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            d["batch"] = BatchConfig(**d.get("batch", {}))
            d["noise"] = NoiseConfig.from_dict(d.get("noise"))
            d["transport"] = TransportConfig(**d.get("transport", {}))
            return cls(**d)
        except TypeError as exc:
            raise UsageError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as f:
                raw = json.load(f)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        cfg = cls.from_dict(raw)
        base = Path(path).resolve().parent
        # dataset paths are relative to the config file
        if cfg.dataset.get("path") and not Path(cfg.dataset["path"]).is_absolute():
            cfg.dataset["path"] = str(base / cfg.dataset["path"])
        return cfg

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        for k, v in kw.items():
            if v is None:
                continue
            if k in ("host", "port", "timeout_s"):
                d["transport"][k] = v
            elif k == "transport_kind":
                d["transport"]["kind"] = v
            else:
                d[k] = v
        return RunConfig.from_dict(d)
