"""Pipeline configuration: nested dataclasses loaded from YAML with strict keys."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml


@dataclass
class DemoSection:
    per_task: int = 40          # scripted demonstrations per task (world model + synthesis)
    play_per_task: int = 40     # rate-randomised base-policy rollouts per task (world model only)
    heldout_per_task: int = 10  # demos kept aside for world-model fidelity checks
    seed: int = 0


@dataclass
class WmSection:
    hidden: int = 64            # GRU hidden dimension
    layers: int = 3             # GRU layers
    lr: float = 3e-3
    lr_final: float = 1e-4
    batch: int = 256
    epochs: int = 60
    l_max: int = 24
    patience: int = 8
    clip: float = 1.0


@dataclass
class SynthSection:
    stride: int = 2


@dataclass
class IqlSection:
    expectile: float = 0.95
    lr: float = 3e-3
    lr_final: float = 1e-4
    batch: int = 256
    steps: int = 10_000
    hidden: int = 64
    seq_hidden: int = 64
    residual: str = "q_minus_v"


@dataclass
class EvalSection:
    trials: int = 100
    variants: list = field(default_factory=lambda: ["base", "ds-4", "mpc-0.015", "sup"])
    seed: int = 10_000


@dataclass
class PipelineConfig:
    seed: int = 0
    tasks: list = field(default_factory=lambda: ["pick_place", "push_path", "fold"])
    chunk_len: int = 24
    k_min: int = 1
    k_max: int = 4
    epsilon: float = 0.015
    gamma: float = 0.9
    penalty: str = "paper"      # "paper" (violation reward paper_penalty) | "theory" (1.1 x bound) | a number
    paper_penalty: float = -5.0
    demos: DemoSection = field(default_factory=DemoSection)
    wm: WmSection = field(default_factory=WmSection)
    synth: SynthSection = field(default_factory=SynthSection)
    iql: IqlSection = field(default_factory=IqlSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")
        if self.k_max > self.chunk_len:
            raise ValueError("k_max exceeds the chunk length")
        if self.wm.l_max < self.k_max * (self.chunk_len // self.k_max):
            raise ValueError("wm.l_max must cover k_max * floor(chunk_len / k_max)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0.0 < self.iql.expectile < 1.0:
            raise ValueError("expectile must lie in (0, 1)")
        if not isinstance(self.penalty, (int, float)) and self.penalty not in ("theory", "paper"):
            raise ValueError(f"penalty must be 'theory', 'paper' or a positive number, got {self.penalty!r}")
        if isinstance(self.penalty, (int, float)) and self.penalty <= 0:
            raise ValueError("a numeric penalty is the magnitude Omega and must be positive")
        if self.demos.per_task < 1:
            raise ValueError("need at least one demo per task")
        for v in self.eval.variants:
            parse_variant(v)
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self, *sections) -> str:
        """Stable hash of the whole config or of the named top-level entries."""
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parse_variant(name: str):
    """``base`` | ``ds-<k>`` | ``mpc-<eps>`` | ``sup`` -> ``(kind, param)``."""
    if name in ("base", "sup"):
        return name, None
    if name.startswith("ds-"):
        return "ds", int(name[3:])
    if name.startswith("mpc-"):
        return "mpc", float(name[4:])
    raise ValueError(f"unknown variant {name!r}")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"{where or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValueError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for k, v in data.items():
        sub = fields[k].default_factory if fields[k].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub) and isinstance(sub, type):
            kwargs[k] = _build(sub, v, f"{where}{k}.")
        else:
            kwargs[k] = v
    return cls(**kwargs)


def from_dict(data) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "").validate()


def load_config(path=None, preset=None) -> PipelineConfig:
    """Config from a YAML file, layered over a named preset (default: ``default``)."""
    base = PRESETS[preset or "default"]
    data = json.loads(json.dumps(base))
    if path is not None:
        with open(path) as f:
            user = yaml.safe_load(f) or {}
        if "preset" in user:
            data = json.loads(json.dumps(PRESETS[user.pop("preset")]))
        _merge(data, user, "")
    return from_dict(data)


def _merge(dst, src, where):
    if not isinstance(src, dict):
        raise ValueError(f"{where or 'config'}: expected a mapping")
    for k, v in src.items():
        if k not in dst:
            raise ValueError(f"unknown config key {where}{k}")
        if isinstance(dst[k], dict):
            _merge(dst[k], v, f"{where}{k}.")
        else:
            dst[k] = v


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


_DEFAULT = PipelineConfig().to_dict()

PRESETS = {
    "default": _DEFAULT,
    # small and fast; used by the determinism check and smoke tests
    "ci": {**_DEFAULT,
           "demos": {"per_task": 4, "play_per_task": 2, "heldout_per_task": 1, "seed": 0},
           "wm": {**_DEFAULT["wm"], "hidden": 16, "layers": 2, "epochs": 2, "batch": 128},
           "synth": {"stride": 8},
           "iql": {**_DEFAULT["iql"], "steps": 60, "hidden": 16, "seq_hidden": 8, "batch": 64},
           "eval": {**_DEFAULT["eval"], "trials": 3}},
    # the published network sizes; slow on a laptop CPU
    "paper": {**_DEFAULT, "wm": {**_DEFAULT["wm"], "hidden": 256, "batch": 512, "lr": 3e-4, "lr_final": 3e-4}},
}
