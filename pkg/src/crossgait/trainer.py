"""Identity-balanced dual-modality sampling, the optimization loop and checkpoints."""
from __future__ import annotations

import csv
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import numerics as nx
from .config import build, dump_section, parse_text
from .losses import LossReport, total_loss
from .model import EncoderConfig, ModelConfig, Params, check_params, forward_batch, init_params
from .numerics import NonFiniteError, OptimizerState, adam_step
from .store import SequenceRecord

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """A non-finite loss stopped training; ``iteration`` is the failing step."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass
class TrainConfig:
    p_ids: int = 4
    k_seqs: int = 4
    frames_lidar: int = 8
    frames_camera: int = 8
    total_iters: int = 2000
    base_lr: float = 1e-3
    lr_milestones: tuple[int, ...] = (1000, 1400, 1800)
    lr_factor: float = 0.1
    lam: float = 2.0
    triplet_margin: float = 0.2
    contrastive_margin: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    seed: int = 0
    checkpoint_every: int = 500

    def __post_init__(self):
        self.lr_milestones = tuple(self.lr_milestones)
        if min(self.p_ids, self.k_seqs, self.frames_lidar, self.frames_camera, self.total_iters) < 1:
            raise ValueError("batch sizes, frame counts and total_iters must be positive")
        if self.p_ids < 2:
            raise ValueError("p_ids must be >= 2 so that batches contain negatives")
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m <= 0 or m >= self.total_iters for m in ms):
            raise ValueError(f"lr_milestones {ms} must be strictly increasing within (0, {self.total_iters})")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        base = dict(p_ids=8, k_seqs=8, frames_lidar=10, frames_camera=30, total_iters=60000,
                    lr_milestones=(30000, 40000, 50000))
        base.update(kw)
        return cls(**base)


@dataclass
class ModelSettings:
    """Flat, config-file friendly form of the network shape."""
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (32, 64)
    stage_strides: tuple[int, ...] = (2, 2)
    stem_stride: int = 2
    num_parts: int = 8
    num_prototypes: int = 2
    use_cmfa: bool = True

    def to_model_config(self, num_classes: int) -> ModelConfig:
        enc = EncoderConfig(self.stem_channels, tuple(self.stage_channels), tuple(self.stage_strides),
                            self.stem_stride)
        return ModelConfig(enc, self.num_parts, self.num_prototypes, self.use_cmfa, num_classes)

    @classmethod
    def variant(cls, name: str, **kw) -> "ModelSettings":
        if name == "full":
            return cls(**kw)
        if name == "two-stream":
            return cls(**{**kw, "num_prototypes": 0, "use_cmfa": False})
        raise ValueError(f"unknown variant {name!r} (expected full or two-stream)")


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    passed = sum(1 for m in cfg.lr_milestones if iteration >= m)
    return cfg.base_lr * cfg.lr_factor ** passed


# -- sampling -------------------------------------------------------------------

@dataclass
class Batch:
    identities: np.ndarray
    lidar: np.ndarray          # (P*K, l_L, 1, S, S)
    lidar_labels: np.ndarray
    camera: np.ndarray         # (P*K, l_C, 1, S, S)
    camera_labels: np.ndarray


@dataclass
class TrainingSet:
    """Training records grouped by stream and identity, with dense class labels."""
    records: list[SequenceRecord]
    identities: np.ndarray = field(init=False)
    by_stream: dict[str, dict[int, list[SequenceRecord]]] = field(init=False)

    def __post_init__(self):
        self.by_stream = {"lidar": {}, "camera": {}}
        for r in self.records:
            self.by_stream[r.stream].setdefault(r.identity, []).append(r)
        both = set(self.by_stream["lidar"]) & set(self.by_stream["camera"])
        self.identities = np.array(sorted(both), dtype=np.int64)

    @property
    def num_classes(self) -> int:
        return len(self.identities)

    def label_of(self, identity: int) -> int:
        idx = int(np.searchsorted(self.identities, identity))
        if idx >= len(self.identities) or self.identities[idx] != identity:
            raise KeyError(f"identity {identity} is not a training identity")
        return idx


def sample_window(frames: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous window of ``length`` frames, wrapping around short sequences."""
    t = len(frames)
    start = int(rng.integers(t))
    return frames[(start + np.arange(length)) % t]


def sample_pk_batch(data: TrainingSet, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    if data.num_classes < cfg.p_ids:
        raise SamplingError(f"need {cfg.p_ids} identities with both modalities, "
                            f"training split has {data.num_classes}")
    ids = rng.choice(data.identities, size=cfg.p_ids, replace=False)
    halves = {}
    for stream, length in (("lidar", cfg.frames_lidar), ("camera", cfg.frames_camera)):
        clips, labels = [], []
        for ident in ids:
            pool = data.by_stream[stream][int(ident)]
            picks = rng.choice(len(pool), size=cfg.k_seqs, replace=len(pool) < cfg.k_seqs)
            for i in picks:
                clips.append(sample_window(pool[int(i)].frames, length, rng))
                labels.append(data.label_of(int(ident)))
        halves[stream] = (np.stack(clips), np.array(labels, dtype=np.int64))
    return Batch(ids, *halves["lidar"], *halves["camera"])


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    # one stream per step, so resuming needs nothing beyond the iteration count
    return np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C, iteration]))


# -- optimization ---------------------------------------------------------------

def _clip_grads(params: Params, max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params.values()))
    if total > max_norm:
        for p in params.values():
            p.grad *= max_norm / total


def train_step(batch: Batch, params: Params, opt: OptimizerState, cfg: TrainConfig,
               mcfg: ModelConfig, lr: float | None = None) -> LossReport:
    for p in params.values():
        p.grad = None
    try:
        lf, la = forward_batch(batch.lidar, "lidar", params, mcfg)
        cf, ca = forward_batch(batch.camera, "camera", params, mcfg)
        loss, report = total_loss(lf, la, batch.lidar_labels, cf, ca, batch.camera_labels,
                                  params["head.w"], cfg.lam, cfg.triplet_margin,
                                  cfg.contrastive_margin)
        loss.backward()
    except NonFiniteError as exc:
        raise TrainingAborted(f"non-finite value during step: {exc}", opt.step_count) from exc
    for name, p in params.items():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        elif not np.all(np.isfinite(p.grad)):
            raise TrainingAborted(f"non-finite gradient for parameter {name}", opt.step_count)
    if cfg.grad_clip > 0:
        _clip_grads(params, cfg.grad_clip)
    adam_step(params, opt, (cfg.beta1, cfg.beta2), cfg.eps, lr)
    return report


# -- state and persistence ------------------------------------------------------

@dataclass
class TrainState:
    params: Params
    opt: OptimizerState
    iteration: int
    identities: np.ndarray
    model_cfg: ModelConfig

    @classmethod
    def fresh(cls, cfg: TrainConfig, settings: ModelSettings, identities) -> "TrainState":
        identities = np.asarray(identities, dtype=np.int64)
        mcfg = settings.to_model_config(len(identities))
        with nx.default_dtype(np.float32):
            params = init_params(mcfg, cfg.seed)
        return cls(params, OptimizerState.for_params(params, cfg.base_lr), 0, identities, mcfg)


def config_text(cfg: TrainConfig, settings: ModelSettings) -> str:
    return dump_section("train", cfg) + dump_section("model", settings)


def state_blobs(state: TrainState, cfg: TrainConfig, settings: ModelSettings) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        blobs[f"param/{name}"] = p.data
    for name in state.params:
        blobs[f"adam.m/{name}"] = state.opt.first_moment[name]
        blobs[f"adam.v/{name}"] = state.opt.second_moment[name]
    blobs["adam.step"] = np.array([state.opt.step_count], dtype=np.int64)
    blobs["adam.lr"] = np.array([state.opt.learning_rate], dtype=np.float64)
    blobs["rng.seed"] = np.array([cfg.seed], dtype=np.int64)
    blobs["meta.identities"] = state.identities.astype(np.int64)
    blobs["meta.config"] = np.frombuffer(config_text(cfg, settings).encode("utf-8"), dtype=np.uint8)
    return blobs


def save_checkpoint(path, state: TrainState, cfg: TrainConfig, settings: ModelSettings) -> None:
    checkpoint.save(path, state.iteration, state_blobs(state, cfg, settings))


def load_checkpoint(path) -> tuple[TrainState, TrainConfig, ModelSettings]:
    """Load and fully validate; nothing is returned unless every blob checks out."""
    iteration, blobs = checkpoint.load(path)
    try:
        text = blobs["meta.config"].tobytes().decode("utf-8")
        sections = build({"train": TrainConfig, "model": ModelSettings}, parse_text(text, str(path)))
        cfg, settings = sections["train"], sections["model"]
        identities = blobs["meta.identities"]
        mcfg = settings.to_model_config(len(identities))
        params = {k[len("param/"):]: nx.Tensor(v, requires_grad=True)
                  for k, v in blobs.items() if k.startswith("param/")}
        check_params(params, mcfg)
        opt = OptimizerState(float(blobs["adam.lr"][0]), int(blobs["adam.step"][0]))
        for name, p in params.items():
            m, v = blobs[f"adam.m/{name}"], blobs[f"adam.v/{name}"]
            if m.shape != p.shape or v.shape != p.shape:
                raise checkpoint.CheckpointError(f"optimizer moment shape mismatch for {name}")
            opt.first_moment[name], opt.second_moment[name] = m, v
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"{path}: missing blob {exc}") from None
    except nx.DimensionError as exc:
        raise checkpoint.CheckpointError(f"{path}: {exc}") from None
    return TrainState(params, opt, iteration, identities, mcfg), cfg, settings


# -- the loop -------------------------------------------------------------------

LOG_HEADER = ("iteration", "lr") + LossReport.FIELDS


def train(data: TrainingSet, cfg: TrainConfig, settings: ModelSettings,
          state: TrainState | None = None, out_dir: str | os.PathLike | None = None,
          until: int | None = None, on_step: Callable[[int, LossReport], None] | None = None,
          progress_every: int = 100) -> TrainState:
    """Run iterations ``state.iteration .. until`` (default ``cfg.total_iters``).

    With ``out_dir`` a checkpoint lands there every ``checkpoint_every`` steps
    and at the end, and each step's losses are appended to ``loss_log.csv``.
    """
    state = state or TrainState.fresh(cfg, settings, data.identities)
    if not np.array_equal(state.identities, data.identities):
        raise SamplingError("training identities differ from those the checkpoint was trained on")
    until = cfg.total_iters if until is None else until
    out = Path(out_dir) if out_dir is not None else None
    writer = logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "loss_log.csv"
        if state.iteration == 0 or not log_path.exists():
            logf = open(log_path, "w", newline="")
            writer = csv.writer(logf, lineterminator="\n")
            writer.writerow(LOG_HEADER)
        else:
            _truncate_log(log_path, state.iteration)
            logf = open(log_path, "a", newline="")
            writer = csv.writer(logf, lineterminator="\n")
    try:
        while state.iteration < until:
            it = state.iteration
            lr = lr_schedule(it, cfg)
            batch = sample_pk_batch(data, cfg, batch_rng(cfg.seed, it))
            try:
                report = train_step(batch, state.params, state.opt, cfg, state.model_cfg, lr)
            except TrainingAborted as exc:
                exc.iteration = it
                raise
            state.iteration = it + 1
            if writer is not None:
                writer.writerow([it, repr(lr)] + [repr(v) if isinstance(v, float) else v
                                                  for v in report.as_row()])
            if on_step is not None:
                on_step(it, report)
            if progress_every and state.iteration % progress_every == 0:
                print(f"iter {state.iteration}/{until} loss {report.total:.4f} lr {lr:.1e}",
                      file=sys.stderr)
            if out is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
                logf.flush()
                save_checkpoint(out / f"ckpt_{state.iteration:06d}.cgc", state, cfg, settings)
        if out is not None:
            name = "final.cgc" if state.iteration >= cfg.total_iters else f"ckpt_{state.iteration:06d}.cgc"
            save_checkpoint(out / name, state, cfg, settings)
    finally:
        if logf is not None:
            logf.close()
    return state


def _truncate_log(path: Path, iteration: int) -> None:
    """Drop log rows at or past ``iteration`` so a resumed run does not duplicate them."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < iteration]
    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(keep)


def summary(state: TrainState) -> dict:
    return {"iteration": state.iteration, "model": asdict(state.model_cfg),
            "num_classes": int(len(state.identities))}


__all__ = [
    "Batch", "LOG_HEADER", "ModelSettings", "SamplingError", "TrainConfig", "TrainState",
    "TrainingAborted", "TrainingSet", "batch_rng", "config_text", "load_checkpoint",
    "lr_schedule", "sample_pk_batch", "sample_window", "save_checkpoint", "summary", "train",
    "train_step",
]
