"""Two-stream gait network with shared prototypes and a shared part-wise adapter.

Each modality has its own convolutional encoder. Frame features are max-pooled
over time, then summarized two ways: horizontal strips, and learnable
prototypes (shared by both modalities) that attend over pixels. The two are
concatenated into part embeddings, and one shared linear map per part
projects them into the common identity space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor

MODALITY_STREAMS = ("lidar", "camera")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    stem_channels: int = 32
    stage_channels: tuple[int, ...] = (32, 64, 128)
    stage_strides: tuple[int, ...] = (1, 2, 2)
    stem_stride: int = 1
    input_size: int = 64
    in_channels: int = 1

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides):
            raise ModelConfigError("stage_channels and stage_strides differ in length")
        if min((self.stem_channels, self.input_size, self.in_channels, self.stem_stride,
                *self.stage_channels, *self.stage_strides)) < 1:
            raise ModelConfigError("encoder sizes and strides must be positive")

    @classmethod
    def desk(cls) -> "EncoderConfig":
        """A shallower stack that trains in minutes on one CPU core."""
        return cls(stem_channels=16, stage_channels=(32, 64), stage_strides=(2, 2), stem_stride=2)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1] if self.stage_channels else self.stem_channels

    def feature_size(self) -> int:
        size = nx.conv_output_size(self.input_size, 3, self.stem_stride, 1)
        for s in self.stage_strides:
            size = nx.conv_output_size(size, 3, s, 1)
        return size


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_parts: int = 8
    num_prototypes: int = 2
    use_cmfa: bool = True
    num_classes: int = 24

    def __post_init__(self):
        if self.num_prototypes < 0:
            raise ModelConfigError("num_prototypes must be >= 0")
        if self.num_parts < 1 or self.num_classes < 1:
            raise ModelConfigError("num_parts and num_classes must be positive")
        h = self.encoder.feature_size()
        if h % self.num_parts:
            raise ModelConfigError(
                f"feature map height {h} is not divisible by num_parts={self.num_parts}")

    @property
    def channels(self) -> int:
        return self.encoder.out_channels

    @property
    def total_parts(self) -> int:
        return self.num_prototypes + self.num_parts

    @property
    def hw(self) -> int:
        return self.encoder.feature_size() ** 2


Params = dict[str, Tensor]


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=nx.get_default_dtype())


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=nx.get_default_dtype())


def _encoder_layout(cfg: EncoderConfig):
    """(name, cin, cout, kernel, stride) for every conv in the encoder."""
    convs = [("stem", cfg.in_channels, cfg.stem_channels, 3, cfg.stem_stride)]
    cin = cfg.stem_channels
    for i, (cout, s) in enumerate(zip(cfg.stage_channels, cfg.stage_strides)):
        convs.append((f"s{i}.conv1", cin, cout, 3, s))
        convs.append((f"s{i}.conv2", cout, cout, 3, 1))
        if cin != cout or s != 1:
            convs.append((f"s{i}.skip", cin, cout, 1, s))
        cin = cout
    return convs


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Fresh parameters; the two encoders are drawn from independent streams."""
    params: Params = {}
    c, hw = cfg.channels, cfg.hw
    for code, stream in enumerate(MODALITY_STREAMS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE7C, code]))
        for name, cin, cout, k, _ in _encoder_layout(cfg.encoder):
            params[f"{stream}.{name}.w"] = _uniform(rng, (cout, cin, k, k), cin * k * k)
            if not name.endswith("skip"):
                params[f"{stream}.{name}.b"] = _zeros((cout,))
        if cfg.num_prototypes:
            params[f"{stream}.pmam.wk"] = _uniform(rng, (hw, hw), hw)
            params[f"{stream}.pmam.wv"] = _uniform(rng, (hw, hw), hw)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A7]))
    if cfg.num_prototypes:
        params["shared.q"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(c), size=(cfg.num_prototypes, c)),
                                    requires_grad=True, dtype=nx.get_default_dtype())
    if cfg.use_cmfa:
        params["shared.cmfa"] = Tensor(np.broadcast_to(np.eye(c), (cfg.total_parts, c, c)).copy(),
                                       requires_grad=True, dtype=nx.get_default_dtype())
    params["head.w"] = _uniform(rng, (cfg.total_parts, c, cfg.num_classes), c)
    return params


def check_params(params: Params, cfg: ModelConfig) -> None:
    expected = init_params(cfg, 0)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DimensionError(f"parameter names differ: missing {missing}, unexpected {extra}")
    for name, ref in expected.items():
        if ref.shape != params[name].shape:
            raise DimensionError(f"{name}: expected shape {ref.shape}, got {params[name].shape}")


def encode_frames(frames: np.ndarray | Tensor, stream: str, params: Params,
                  cfg: EncoderConfig) -> Tensor:
    """(N, 1, S, S) frames -> (N, h, w, C) channels-last feature maps."""
    x = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ModelConfigError(
            f"expected frames of shape (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}),"
            f" got {x.shape}")
    h = Tensor(np.ascontiguousarray(x.transpose(0, 2, 3, 1)), dtype=nx.get_default_dtype())
    p = lambda n: params[f"{stream}.{n}"]  # noqa: E731
    h = nx.relu(nx.conv2d_nhwc(h, p("stem.w"), cfg.stem_stride, 1) + p("stem.b"))
    cin = cfg.stem_channels
    for i, (cout, s) in enumerate(zip(cfg.stage_channels, cfg.stage_strides)):
        y = nx.relu(nx.conv2d_nhwc(h, p(f"s{i}.conv1.w"), s, 1) + p(f"s{i}.conv1.b"))
        y = nx.conv2d_nhwc(y, p(f"s{i}.conv2.w"), 1, 1) + p(f"s{i}.conv2.b")
        skip = nx.conv2d_nhwc(h, p(f"s{i}.skip.w"), s, 0) if (cin != cout or s != 1) else h
        h = nx.relu(y + skip)
        cin = cout
    return h


def temporal_pool(feats: Tensor, frames_per_seq: int) -> Tensor:
    """(B*T, h, w, C) -> (B, h*w, C) by element-wise max over each sequence's frames."""
    n, h, w, c = feats.shape
    if frames_per_seq < 1 or n % frames_per_seq:
        raise DimensionError(f"{n} frames do not split into sequences of {frames_per_seq}")
    x = nx.reshape(feats, (n // frames_per_seq, frames_per_seq, h * w, c))
    return nx.max_over_axis(x, 1)


def horizontal_partition(pooled: Tensor, height: int, p: int) -> Tensor:
    """(B, H*W, C) row-major map -> (B, p, C), each strip pooled by (max + mean) / 2."""
    b, hw, c = pooled.shape
    if height < 1 or hw % height or height % p:
        raise DimensionError(f"map of height {height} cannot be split into {p} strips")
    strips = nx.reshape(pooled, (b, p, hw // p, c))
    return nx.mul_scalar(nx.max_over_axis(strips, 2) + nx.mean(strips, 2), 0.5)


def pmam_attention(f: Tensor, q: Tensor, wk: Tensor, wv: Tensor) -> tuple[Tensor, Tensor]:
    """Prototype attention over pixels; returns (prototype features, attention weights).

    f: (B, HW, C). Keys and values project along the pixel axis, k = Wk^T f.
    """
    hw = f.shape[-2]
    if wk.shape != (hw, hw) or wv.shape != (hw, hw) or q.shape[-1] != f.shape[-1]:
        raise DimensionError(
            f"pmam shapes disagree: F {f.shape}, Q {q.shape}, Wk {wk.shape}, Wv {wv.shape}")
    k = nx.matmul(wk.T, f)
    v = nx.matmul(wv.T, f)
    logits = nx.mul_scalar(nx.matmul(q, nx.transpose(k, (*range(k.ndim - 2), k.ndim - 1, k.ndim - 2))),
                           1.0 / math.sqrt(hw))
    attn = nx.softmax_rows(logits)
    return nx.matmul(attn, v), attn


def pmam_forward(f: Tensor, q: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    return pmam_attention(f, q, wk, wv)[0]


def fuse(parts: Tensor, prototypes: Tensor | None) -> Tensor:
    """Concatenate along the part axis, prototypes first."""
    if prototypes is None or prototypes.shape[-2] == 0:
        return parts
    if prototypes.shape[-1] != parts.shape[-1]:
        raise DimensionError(f"channel mismatch: prototypes {prototypes.shape}, parts {parts.shape}")
    return nx.concat([prototypes, parts], axis=-2)


def cmfa_apply(fused: Tensor, w_shared: Tensor) -> Tensor:
    """Per-part linear map without bias: out[b, i] = W[i] @ fused[b, i]."""
    if fused.ndim == 2:
        fused = nx.reshape(fused, (1, *fused.shape))
        return nx.reshape(cmfa_apply(fused, w_shared), fused.shape[1:])
    if w_shared.ndim != 3 or w_shared.shape[0] != fused.shape[1]:
        raise DimensionError(
            f"cmfa has {w_shared.shape[0] if w_shared.ndim == 3 else '?'} part maps, "
            f"embedding has {fused.shape[1]} parts")
    per_part = nx.transpose(fused, (1, 0, 2))                       # (P, B, C)
    out = nx.matmul(per_part, nx.transpose(w_shared, (0, 2, 1)))    # rows times W^T
    return nx.transpose(out, (1, 0, 2))


def forward_batch(frames: np.ndarray, stream: str, params: Params, cfg: ModelConfig
                  ) -> tuple[Tensor, Tensor]:
    """(B, T, 1, S, S) equal-length sequences -> (fused, aligned), each (B, K+p, C)."""
    frames = np.asarray(frames)
    if frames.ndim != 5:
        raise ModelConfigError(f"expected (B, T, 1, S, S) frames, got {frames.shape}")
    if stream not in MODALITY_STREAMS:
        raise ModelConfigError(f"unknown stream {stream!r}")
    b, t = frames.shape[:2]
    feats = encode_frames(frames.reshape(b * t, *frames.shape[2:]), stream, params, cfg.encoder)
    height = feats.shape[1]
    pooled = temporal_pool(feats, t)
    parts = horizontal_partition(pooled, height, cfg.num_parts)
    protos = None
    if cfg.num_prototypes:
        protos = pmam_forward(pooled, params["shared.q"], params[f"{stream}.pmam.wk"],
                              params[f"{stream}.pmam.wv"])
    fused = fuse(parts, protos)
    aligned = cmfa_apply(fused, params["shared.cmfa"]) if cfg.use_cmfa else fused
    return fused, aligned


def forward_sequence(frames: np.ndarray, stream: str, params: Params, cfg: ModelConfig
                     ) -> tuple[Tensor, Tensor]:
    """One (T, 1, S, S) sequence -> (fused, aligned), each (K+p, C)."""
    fused, aligned = forward_batch(np.asarray(frames)[None], stream, params, cfg)
    parts = (cfg.total_parts, cfg.channels)
    return nx.reshape(fused, parts), nx.reshape(aligned, parts)


def class_logits(aligned: Tensor, params: Params) -> Tensor:
    """(B, P, C) -> (P, B, numIds) with one head matrix per part."""
    return nx.matmul(nx.transpose(aligned, (1, 0, 2)), params["head.w"])
