"""The relation-aware 1D pyramid proposal network.

Bottom-up convolutional trunk over a [T, D] feature map, per-level
self-attention enhancement, top-down fusion with lateral 1-tap convolutions
and nearest-neighbor upsampling, per-level proposal heads (confidence,
center, width per anchor) and an auxiliary actionness head on the finest
merged level. Box parameterization follows the sigmoid-center /
exponential-width convention.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet
from .autodiff import _sigmoid as stable_sigmoid
from .data import ProposalRecord, TemporalSegment
from .errors import ContractError, FormatError, IngestError, ShapeError
from .util import from_mapping

CHECKPOINT_MAGIC = b"RAPC"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_t: int = 128
    input_d: int = 256
    levels: int = 6
    anchors_per_level: int = 2
    trunk_channels: int = 64
    attention_levels: tuple[int, ...] | None = None  # None selects every level
    lambda_conf: float = 0.2
    lambda_c: float = 1.0
    lambda_w: float = 1.0
    lambda_iou: float = 1.0
    theta_iou: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.anchors_per_level < 1 or self.trunk_channels < 1:
            raise ContractError("levels, anchors_per_level and trunk_channels must be positive")
        if self.input_t % (2 ** (self.levels - 1)) != 0:
            raise ContractError(
                f"input_t={self.input_t} must be divisible by 2^(levels-1)={2 ** (self.levels - 1)}"
            )
        if self.attention_levels is None:
            self.attention_levels = tuple(range(self.levels))
        else:
            self.attention_levels = tuple(sorted(set(int(i) for i in self.attention_levels)))
            if any(i < 0 or i >= self.levels for i in self.attention_levels):
                raise ContractError(f"attention_levels out of range: {self.attention_levels}")

    @property
    def level_lengths(self) -> list[int]:
        return [self.input_t // (2 ** i) for i in range(self.levels)]

    def level_stride(self, level: int) -> float:
        return (2 ** level) / self.input_t

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["attention_levels"] = list(self.attention_levels)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return from_mapping(cls, doc, "model config")


@dataclass
class LevelPredictions:
    """Raw head outputs per pyramid level, plus the finest-level actionness."""

    conf_logits: list[ad.Tensor]   # level i: [M, T_i]
    center_logits: list[ad.Tensor]
    width_logs: list[ad.Tensor]
    actionness_logits: ad.Tensor   # [T]


@dataclass
class DecodedProposals:
    """Vectorized decode output with (level, position, anchor) provenance."""

    level: np.ndarray
    position: np.ndarray
    anchor: np.ndarray
    start: np.ndarray
    end: np.ndarray
    score: np.ndarray
    dropped: int = 0

    def __len__(self):
        return self.start.size


class PyramidModel:
    """Parameter store plus the forward pass."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, ad.Parameter] = {}
        rng = np.random.default_rng(config.seed)
        c, d, m = config.trunk_channels, config.input_d, config.anchors_per_level

        self._add_conv(rng, "stem", d, c, 3)
        for i in range(1, config.levels):
            self._add_conv(rng, f"down{i}", c, c, 3)
        for i in config.attention_levels:
            bound = 1.0 / np.sqrt(c)
            for name in ("wq", "wk", "wv", "wo"):
                self._add(f"level{i}/attn/{name}", rng.uniform(-bound, bound, size=(c, c)))
        for i in range(config.levels - 1):
            self._add_conv(rng, f"level{i}/lateral", c, c, 1)
        for i in range(config.levels):
            self._add_conv(rng, f"level{i}/head", c, 3 * m, 1)
            # start confidence pessimistic so the negative class does not swamp early steps
            self.params[f"level{i}/head/bias"].data[:m] = -2.0
        self._add_conv(rng, "actionness", c, 1, 1)

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = ad.Parameter(name, values)

    def _add_conv(self, rng, name: str, c_in: int, c_out: int, k: int) -> None:
        bound = 1.0 / np.sqrt(c_in * k)
        self._add(f"{name}/weight", rng.uniform(-bound, bound, size=(c_out, c_in, k)))
        self._add(f"{name}/bias", np.zeros(c_out))

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ContractError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _conv(self, name, x, stride, padding):
        return ad.conv1d(
            x, self.params[f"{name}/weight"], self.params[f"{name}/bias"],
            stride=stride, padding=padding,
        )

    def forward(self, features: np.ndarray, tape: ad.Tape | None = None) -> LevelPredictions:
        """Run the network over a [T, D] feature matrix.

        Attach a tape to record the pass for training; without one this is a
        pure numpy evaluation.
        """
        cfg = self.config
        if features.shape != (cfg.input_t, cfg.input_d):
            raise ShapeError(
                f"features must be [{cfg.input_t} x {cfg.input_d}], got {features.shape}"
            )
        x = ad.Tensor(np.ascontiguousarray(features.T, dtype=np.float64), tape)

        h = ad.relu(self._conv("stem", x, 1, 1))
        trunk = [h]
        for i in range(1, cfg.levels):
            h = ad.relu(self._conv(f"down{i}", h, 2, 1))
            trunk.append(h)

        enhanced = []
        for i, feat in enumerate(trunk):
            if i in cfg.attention_levels:
                p = self.params
                att = ad.self_attention(
                    ad.transpose(feat),
                    p[f"level{i}/attn/wq"], p[f"level{i}/attn/wk"],
                    p[f"level{i}/attn/wv"], p[f"level{i}/attn/wo"],
                )
                enhanced.append(ad.transpose(att))
            else:
                enhanced.append(feat)

        merged = [None] * cfg.levels
        merged[-1] = enhanced[-1]
        for i in range(cfg.levels - 2, -1, -1):
            lateral = self._conv(f"level{i}/lateral", enhanced[i], 1, 0)
            merged[i] = ad.add(lateral, ad.repeat2(merged[i + 1]))

        m = cfg.anchors_per_level
        conf, center, width = [], [], []
        for i in range(cfg.levels):
            head = self._conv(f"level{i}/head", merged[i], 1, 0)
            conf.append(head[0:m])
            center.append(head[m : 2 * m])
            width.append(head[2 * m : 3 * m])
        actionness = self._conv("actionness", merged[0], 1, 0)[0]
        return LevelPredictions(conf, center, width, actionness)


def build_model(config: ModelConfig) -> PyramidModel:
    return PyramidModel(config)


# ------------------------------------------------------------------ decode


def decode_arrays(preds: LevelPredictions, anchor_set: AnchorSet, input_t: int) -> DecodedProposals:
    """Decode every (level, position, anchor) cell into scored segments.

    Cells whose clamped segment collapses to zero width are dropped and
    counted in ``dropped``.
    """
    n = anchor_set.num_levels
    if len(preds.conf_logits) != n:
        raise ContractError(
            f"anchor set has {n} levels but predictions have {len(preds.conf_logits)}"
        )
    levels, positions, anchors_idx = [], [], []
    starts, ends, scores = [], [], []
    dropped = 0
    for i in range(n):
        stride = (2 ** i) / input_t
        conf = preds.conf_logits[i].data
        cent = preds.center_logits[i].data
        wlog = preds.width_logs[i].data
        m, t_i = conf.shape
        widths = np.asarray(anchor_set.levels[i])[:, None]
        with np.errstate(over="ignore"):
            center = (np.arange(t_i)[None, :] + stable_sigmoid(cent)) * stride
            width = widths * np.exp(wlog)
            s = np.clip(center - width / 2.0, 0.0, 1.0)
            e = np.clip(center + width / 2.0, 0.0, 1.0)
        score = stable_sigmoid(conf)
        keep = s < e
        dropped += int((~keep).sum())
        kk, jj = np.nonzero(keep)
        levels.append(np.full(kk.size, i, dtype=np.int64))
        positions.append(jj.astype(np.int64))
        anchors_idx.append(kk.astype(np.int64))
        starts.append(s[kk, jj])
        ends.append(e[kk, jj])
        scores.append(score[kk, jj])
    return DecodedProposals(
        level=np.concatenate(levels),
        position=np.concatenate(positions),
        anchor=np.concatenate(anchors_idx),
        start=np.concatenate(starts),
        end=np.concatenate(ends),
        score=np.concatenate(scores),
        dropped=dropped,
    )


def decode(
    preds: LevelPredictions,
    anchor_set: AnchorSet,
    input_t: int,
    video_id: str,
    source: str = "model",
) -> list[ProposalRecord]:
    """ProposalRecord view of ``decode_arrays`` for the file-based pipeline."""
    arrs = decode_arrays(preds, anchor_set, input_t)
    records = []
    for i in range(len(arrs)):
        records.append(
            ProposalRecord(
                video_id=video_id,
                segment=TemporalSegment(float(arrs.start[i]), float(arrs.end[i])),
                score=float(arrs.score[i]),
                stage_scores={"raw_conf": float(arrs.score[i])},
                source=source,
            )
        )
    return records


def encode_segment(
    segment: TemporalSegment, level: int, position: int, anchor_width: float, input_t: int
) -> tuple[float, float]:
    """Inverse of decode for one cell: (center_logit, width_log).

    Only defined when the segment's center falls strictly inside the cell.
    """
    stride = (2 ** level) / input_t
    center = (segment.start + segment.end) / 2.0
    offset = center / stride - position
    if not (0.0 < offset < 1.0):
        raise ContractError(
            f"segment center {center} is not inside cell (level={level}, position={position})"
        )
    center_logit = float(np.log(offset / (1.0 - offset)))
    width_log = float(np.log(segment.width / anchor_width))
    return center_logit, width_log


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, config_doc: dict, arrays: dict[str, np.ndarray]) -> None:
    """Binary checkpoint: magic | version | config JSON | named float64 tensors."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    config_bytes = json.dumps(config_doc, sort_keys=True).encode("utf-8")
    blob += struct.pack("<I", len(config_bytes))
    blob += config_bytes
    blob += struct.pack("<I", len(arrays))
    for name in arrays:
        payload = np.ascontiguousarray(arrays[name], dtype="<f8")
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<I", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<I", payload.ndim)
        blob += struct.pack(f"<{payload.ndim}I", *payload.shape)
        blob += payload.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise IngestError(f"checkpoint not found: {path}") from None
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0: {blob[:4]!r}")
    offset = 4

    def unpack(fmt):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise FormatError(f"{path}: truncated at byte {offset}")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    (version,) = unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    (config_len,) = unpack("<I")
    config_doc = json.loads(blob[offset : offset + config_len].decode("utf-8"))
    offset += config_len
    (count,) = unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = unpack("<I")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = unpack("<I")
        shape = unpack(f"<{rank}I")
        size = int(np.prod(shape)) * 8 if rank else 8
        if offset + size > len(blob):
            raise FormatError(f"{path}: tensor {name!r} truncated at byte {offset}")
        arr = np.frombuffer(blob, dtype="<f8", count=int(np.prod(shape)) if rank else 1, offset=offset)
        arrays[name] = arr.reshape(shape).copy()
        offset += size
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes at {offset}")
    return config_doc, arrays
