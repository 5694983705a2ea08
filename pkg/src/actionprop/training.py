"""Deterministic whole-video mini-batch training and the gradient-check harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .anchors import AnchorSet
from .data import SyntheticCorpus, rescale_features
from .errors import ContractError, NumericError
from .losses import assign_labels, compute_loss
from .model import ModelConfig, PyramidModel, build_model, decode_arrays, save_checkpoint
from .util import from_mapping


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gradient_clip_norm: float | None = 10.0
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0:
            raise ContractError("epochs, batch_size and learning_rate must be nonnegative/positive")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        if self.gradient_clip_norm is not None and self.gradient_clip_norm <= 0:
            raise ContractError("gradient_clip_norm must be positive when set")

    def to_dict(self) -> dict:
        doc = {f: getattr(self, f) for f in self.__dataclass_fields__}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return from_mapping(cls, doc, "train config")


class MomentumSGD:
    def __init__(self, params: list[ad.Parameter], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.data) for p in params}

    def step(self) -> None:
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"optim/velocity/{k}": v.copy() for k, v in self.velocity.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            self.velocity[k] = arrays[f"optim/velocity/{k}"].copy()


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim/t": np.array([float(self.t)])}
        out.update({f"optim/m/{k}": v.copy() for k, v in self.m.items()})
        out.update({f"optim/v/{k}": v.copy() for k, v in self.v.items()})
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["optim/t"][0])
        for k in self.m:
            self.m[k] = arrays[f"optim/m/{k}"].copy()
            self.v[k] = arrays[f"optim/v/{k}"].copy()


def make_optimizer(cfg: TrainConfig, params: list[ad.Parameter]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return MomentumSGD(params, cfg.learning_rate, cfg.momentum)


def clip_global_norm(params: list[ad.Parameter], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


@dataclass
class TrainResult:
    net: PyramidModel
    log: list[dict] = field(default_factory=list)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: SyntheticCorpus,
    anchor_set: AnchorSet,
    resume_arrays: dict | None = None,
    start_epoch: int = 0,
) -> TrainResult:
    """Optimize the composite loss over the corpus's training split.

    Shuffling is derived from (seed, epoch), so a run resumed from a
    checkpoint at an epoch boundary continues bit-identically.
    """
    video_ids = corpus.subset_ids("training")
    if not video_ids:
        raise ContractError("corpus has no training videos")
    net = build_model(model_cfg)
    params = net.parameters()
    optimizer = make_optimizer(train_cfg, params)
    if resume_arrays is not None:
        net.load_state({k: v for k, v in resume_arrays.items() if not k.startswith("optim/")})
        optimizer.load_state({k: v for k, v in resume_arrays.items() if k.startswith("optim/")})

    inputs = {
        vid: rescale_features(corpus.features[vid], model_cfg.input_t).values.astype(np.float64)
        for vid in video_ids
    }
    gts = {vid: corpus.annotations[vid].segments for vid in video_ids}

    log: list[dict] = []
    step = 0
    for epoch in range(start_epoch, train_cfg.epochs):
        t0 = time.perf_counter()
        order = list(np.random.default_rng([train_cfg.seed, epoch]).permutation(len(video_ids)))
        sums = {"conf_pos": 0.0, "conf_neg": 0.0, "center": 0.0, "width": 0.0, "iou": 0.0, "total": 0.0}
        batches = [
            [video_ids[i] for i in order[b : b + train_cfg.batch_size]]
            for b in range(0, len(order), train_cfg.batch_size)
        ]
        for batch in batches:
            net.zero_grad()
            for vid in batch:
                tape = ad.Tape()
                preds = net.forward(inputs[vid], tape)
                decoded = decode_arrays(preds, anchor_set, model_cfg.input_t)
                assignment = assign_labels(
                    decoded, gts[vid], anchor_set, model_cfg.input_t, model_cfg.theta_iou
                )
                try:
                    breakdown, total = compute_loss(
                        preds, assignment, gts[vid], anchor_set, model_cfg.input_t,
                        model_cfg.lambda_conf, model_cfg.lambda_c,
                        model_cfg.lambda_w, model_cfg.lambda_iou,
                    )
                except NumericError as exc:
                    raise NumericError(f"step {step}, video {vid}: {exc}") from exc
                for key in sums:
                    sums[key] += getattr(breakdown, key)
                ad.backward(ad.scale(total, 1.0 / len(batch)), params=params)
            if train_cfg.gradient_clip_norm is not None:
                clip_global_norm(params, train_cfg.gradient_clip_norm)
            optimizer.step()
            step += 1
        n = len(video_ids)
        entry = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        entry["wall_time"] = time.perf_counter() - t0
        log.append(entry)

    if train_cfg.checkpoint_path:
        save_training_checkpoint(train_cfg.checkpoint_path, net, anchor_set, optimizer, train_cfg)
    return TrainResult(net=net, log=log)


def save_training_checkpoint(path, net: PyramidModel, anchor_set: AnchorSet, optimizer, train_cfg: TrainConfig) -> None:
    doc = {
        "model": net.config.to_dict(),
        "anchors": anchor_set.to_json_dict(),
        "next_epoch": train_cfg.epochs,
        "optimizer": train_cfg.optimizer,
    }
    arrays = net.state_arrays()
    arrays.update(optimizer.state_arrays())
    save_checkpoint(path, doc, arrays)


def grad_check(
    model_cfg: ModelConfig,
    batch: list[tuple[np.ndarray, list]],
    anchor_set: AnchorSet,
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Label assignments are computed once from the unperturbed parameters and
    held fixed, matching what the analytic gradient differentiates through.
    """
    net = build_model(model_cfg)
    t = model_cfg.input_t
    assignments = []
    for features, gts in batch:
        preds = net.forward(features)
        decoded = decode_arrays(preds, anchor_set, t)
        assignments.append(assign_labels(decoded, gts, anchor_set, t, model_cfg.theta_iou))

    def total_loss() -> float:
        acc = 0.0
        for (features, gts), assignment in zip(batch, assignments):
            preds = net.forward(features)
            _, tracked = compute_loss(
                preds, assignment, gts, anchor_set, t,
                model_cfg.lambda_conf, model_cfg.lambda_c,
                model_cfg.lambda_w, model_cfg.lambda_iou,
            )
            acc += tracked.item()
        return acc / len(batch)

    net.zero_grad()
    for (features, gts), assignment in zip(batch, assignments):
        tape = ad.Tape()
        preds = net.forward(features, tape)
        _, tracked = compute_loss(
            preds, assignment, gts, anchor_set, t,
            model_cfg.lambda_conf, model_cfg.lambda_c,
            model_cfg.lambda_w, model_cfg.lambda_iou,
        )
        ad.backward(ad.scale(tracked, 1.0 / len(batch)), params=net.parameters())

    worst = 0.0
    for p in net.parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.ravel()
        aflat = analytic.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = total_loss()
            flat[i] = orig - eps
            lo = total_loss()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
