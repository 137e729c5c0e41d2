"""Run configuration: YAML schema, presets, and lossless round-trips.

Schema (all keys optional unless noted):

.. code-block:: yaml

    target: sas                  # required: sas | factor-analysis |
                                 #   variable-selection | gaussian-toy
    target_params: {}            # family hyperparameters (e.g. mixture_weight)
    flow:
      kind: realnvp              # realnvp | scalar | exact
      depth: 8                   # coupling layers (or scalar layers)
      depths: [8, 9]             # optional per-model override
      hidden: 256
      conditional: false         # one conditional map on the saturated space
      reference: gaussian        # gaussian | student-t
      student_dof: null
    trainer:
      minibatch: 256
      learning_rate: 1.0e-4
      max_iterations: 10000
      window: 200
      early_stop_tol: 1.0e-3
      patience: 5
    chain:
      kernel: trj                # trj | ctp | standard
      iterations: 10000
      chains: 3
      burn_in_fraction: 0.1
      within_steps: 1
      within_scale: 0.3
      aux_refresh: false
    seed: 0
    out_dir: runs/out
    data_path: null
    synthetic_data: false
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields

import yaml

from .vi import TrainerConfig


class ConfigError(ValueError):
    """Raised with the offending field name for any schema violation."""


@dataclass
class FlowConfig:
    kind: str = "realnvp"
    depth: int = 8
    depths: list[int] | None = None
    hidden: int = 256
    conditional: bool = False
    reference: str = "gaussian"
    student_dof: float | None = None

    def __post_init__(self):
        if self.kind not in ("realnvp", "scalar", "exact"):
            raise ConfigError(f"flow.kind: unknown value {self.kind!r}")
        if self.depth < 1:
            raise ConfigError("flow.depth: must be >= 1")
        if self.reference not in ("gaussian", "student-t"):
            raise ConfigError(f"flow.reference: unknown value {self.reference!r}")
        if self.reference == "student-t" and self.student_dof is None:
            raise ConfigError("flow.student_dof: required for student-t")

    def depth_for(self, model_index: int) -> int:
        if self.depths is not None:
            return self.depths[model_index]
        return self.depth


@dataclass
class ChainConfig:
    kernel: str = "trj"
    iterations: int = 10_000
    chains: int = 3
    burn_in_fraction: float = 0.1
    within_steps: int = 1
    within_scale: float = 0.3
    aux_refresh: bool = False

    def __post_init__(self):
        if self.kernel not in ("trj", "ctp", "standard"):
            raise ConfigError(f"chain.kernel: unknown value {self.kernel!r}")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ConfigError("chain.burn_in_fraction: must lie in [0, 1)")
        if self.iterations < 0 or self.chains < 1:
            raise ConfigError("chain.iterations/chains: out of range")


_TARGETS = ("sas", "factor-analysis", "variable-selection", "gaussian-toy")


@dataclass
class RunConfig:
    target: str
    target_params: dict = field(default_factory=dict)
    flow: FlowConfig = field(default_factory=FlowConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    chain: ChainConfig = field(default_factory=ChainConfig)
    seed: int = 0
    out_dir: str = "runs/out"
    data_path: str | None = None
    synthetic_data: bool = False

    def __post_init__(self):
        if self.target not in _TARGETS:
            raise ConfigError(
                f"target: unknown value {self.target!r} (expected one of "
                f"{', '.join(_TARGETS)})")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("top level: expected a mapping")
        raw = copy.deepcopy(raw)
        if "target" not in raw:
            raise ConfigError("target: missing required field")
        out = {}
        for section, klass in (("flow", FlowConfig), ("trainer", TrainerConfig),
                               ("chain", ChainConfig)):
            sub = raw.pop(section, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"{section}: expected a mapping")
            known = {f.name for f in fields(klass)}
            unknown = set(sub) - known
            if unknown:
                raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown field")
            try:
                out[section] = klass(**sub)
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{section}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown field")
        return cls(**raw, **out)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from exc
        return cls.from_dict(raw)


def preset(name: str) -> RunConfig:
    """Experiment presets with the published defaults pre-filled."""
    if name == "sas":
        return RunConfig(
            target="sas",
            flow=FlowConfig(depths=[8, 9]),
            chain=ChainConfig(kernel="trj", iterations=100_000, chains=3),
            out_dir="runs/sas")
    if name == "factor-analysis":
        return RunConfig(
            target="factor-analysis",
            flow=FlowConfig(depth=16),
            chain=ChainConfig(kernel="trj", iterations=100_000, chains=3),
            out_dir="runs/factor-analysis")
    if name == "variable-selection":
        return RunConfig(
            target="variable-selection",
            target_params={"mixture_weight": 0.9},
            flow=FlowConfig(depth=8, conditional=True),
            trainer=TrainerConfig(max_iterations=40_000),
            chain=ChainConfig(kernel="ctp", iterations=100_000, chains=3,
                              within_steps=0),
            out_dir="runs/variable-selection")
    raise ConfigError(f"preset: unknown value {name!r}")
