"""One self-describing JSON config for the whole pipeline.

Sections map one-to-one onto the module configs; unknown keys are rejected
at every level so typos fail loudly. Flags can override individual keys at
the CLI layer; the effective config is echoed next to every output
directory for provenance.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ContractError, IngestError
from .evaluation import DEFAULT_TIOU_GRID
from .model import ModelConfig
from .postprocess import NmsConfig, PemConfig, TagConfig
from .training import TrainConfig
from .util import from_mapping


@dataclass
class AnchorConfig:
    k: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("anchor k must be >= 1")


@dataclass
class EvalConfig:
    tiou_grid: tuple[float, ...] = DEFAULT_TIOU_GRID
    an_max: int = 100
    subset: str = "validation"

    def __post_init__(self):
        self.tiou_grid = tuple(float(t) for t in self.tiou_grid)
        if self.an_max < 1:
            raise ContractError("an_max must be >= 1")


_SECTIONS = {
    "data": SyntheticSpec,
    "anchors": AnchorConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "nms": NmsConfig,
    "tag": TagConfig,
    "pem": PemConfig,
    "eval": EvalConfig,
}


@dataclass
class PipelineConfig:
    data: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(num_videos=50))
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    nms: NmsConfig = field(default_factory=NmsConfig)
    tag: TagConfig = field(default_factory=TagConfig)
    pem: PemConfig = field(default_factory=PemConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ContractError("pipeline config must be a JSON object")
        unknown = sorted(set(doc) - set(_SECTIONS))
        if unknown:
            raise ContractError(f"pipeline config: unknown sections {unknown}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            if name in doc:
                kwargs[name] = from_mapping(section_cls, doc[name], f"config section {name!r}")
        return cls(**kwargs)

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            value = getattr(self, name)
            doc = dataclasses.asdict(value)
            for key, entry in doc.items():
                if isinstance(entry, tuple):
                    doc[key] = list(entry)
            out[name] = doc
        return out


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed JSON in {path}: {exc}") from None
    return PipelineConfig.from_dict(doc)


def echo_config(cfg: PipelineConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective_config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    return path
