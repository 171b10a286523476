"""Preprocessed sequences held in memory, loaded from a dataset directory or generated directly."""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .preprocess import SequenceRejected, preprocess_frames
from .synthgen.dataset import (
    DatasetSpec,
    GaitSequence,
    RenderSettings,
    load_sequence,
    make_sequence,
    read_dataset_spec,
    read_manifest,
)

# network streams; depth maps derived from LiDAR share the LiDAR stream
STREAM_OF = {"pointcloud": "lidar", "depth": "lidar", "silhouette": "camera"}
CACHE_VERSION = 1


@dataclass
class SequenceRecord:
    sequence_id: str
    identity: int
    condition: str
    view: int
    modality: str
    frames: np.ndarray  # (T, 1, 64, 64) float32

    @property
    def stream(self) -> str:
        return STREAM_OF[self.modality]


def record_from_sequence(seq: GaitSequence) -> SequenceRecord:
    frames = preprocess_frames(seq.frames, seq.modality, seq.view)
    return SequenceRecord(seq.sequence_id, seq.identity, seq.condition.kind, seq.view,
                          seq.modality, frames)


def manifest_fingerprint(root: str | os.PathLike) -> str:
    # manifest.csv alone is seed-blind (it lists structure only), so dataset.cfg joins the hash
    h = hashlib.sha256((Path(root) / "manifest.csv").read_bytes())
    cfg = Path(root) / "dataset.cfg"
    if cfg.exists():
        h.update(cfg.read_bytes())
    return h.hexdigest()


def generate_records(spec: DatasetSpec, split: str | None = None) -> list[SequenceRecord]:
    """Render and preprocess straight to memory, skipping the on-disk files."""
    spec.validate()
    out = []
    for ident in range(spec.num_identities):
        if split is not None and spec.split_of(ident) != split:
            continue
        for walk in range(spec.walks):
            cond = spec.condition_for_walk(walk)
            for view in spec.views:
                for modality in spec.modalities:
                    n, fps = spec.frames_for(modality)
                    settings = RenderSettings(point_budget=spec.point_budget,
                                              sensor_noise_sigma=spec.sensor_noise_sigma)
                    seq = make_sequence(spec.seed, ident, walk, view, modality, cond, n, fps, settings)
                    try:
                        out.append(record_from_sequence(seq))
                    except SequenceRejected:
                        continue
    return out


def _save_cache(path: Path, records: list[SequenceRecord], fingerprint: str) -> None:
    meta = np.array([(r.sequence_id, r.identity, r.condition, r.view, r.modality, len(r.frames))
                     for r in records], dtype=object)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, version=CACHE_VERSION, fingerprint=fingerprint, meta=meta,
             frames=np.concatenate([r.frames for r in records]) if records else np.zeros((0, 1, 64, 64)))
    os.replace(tmp, path)


def _load_cache(path: Path, fingerprint: str) -> list[SequenceRecord] | None:
    try:
        with np.load(path, allow_pickle=True) as z:
            if int(z["version"]) != CACHE_VERSION or str(z["fingerprint"]) != fingerprint:
                return None
            meta, frames = z["meta"], z["frames"]
    except (OSError, KeyError, ValueError):
        return None
    out, pos = [], 0
    for sid, ident, cond, view, modality, t in meta:
        out.append(SequenceRecord(str(sid), int(ident), str(cond), int(view), str(modality),
                                  frames[pos:pos + int(t)]))
        pos += int(t)
    return out


def load_records(root: str | os.PathLike, split: str | None = None,
                 modalities: tuple[str, ...] | None = None,
                 cache_dir: str | os.PathLike | None = None) -> list[SequenceRecord]:
    """Read and preprocess every sequence of ``split`` ('train', 'test' or None for all).

    With ``cache_dir`` the preprocessed arrays are stored keyed by the manifest
    hash, so a changed dataset never reuses a stale cache.
    """
    root = Path(root)
    spec = read_dataset_spec(root)
    rows = read_manifest(root)
    fingerprint = manifest_fingerprint(root)
    cache = None
    if cache_dir is not None:
        cache = Path(cache_dir) / f"preprocessed-{split or 'all'}-{fingerprint[:16]}.npz"
        cached = _load_cache(cache, fingerprint) if cache.exists() else None
        if cached is not None:
            return [r for r in cached if modalities is None or r.modality in modalities]
    records = []
    for row in rows:
        if split is not None and spec.split_of(row.id) != split:
            continue
        try:
            records.append(record_from_sequence(load_sequence(root, row, spec)))
        except SequenceRejected:
            continue
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        _save_cache(cache, records, fingerprint)
    return [r for r in records if modalities is None or r.modality in modalities]
