"""Paired-modality gait sequences, capture conditions and the on-disk dataset."""
from __future__ import annotations

import csv
import io
import os
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..config import dump_section, load_file
from .render import CameraModel, render_silhouette, sample_point_cloud
from .walker import WalkerFrame, attach_box, pose_at, sample_identity, scale_body_radii, stream

CONDITION_KINDS = ("normal", "clothing", "carrying", "night")
MODALITIES = ("silhouette", "pointcloud", "depth")
MODALITY_CODES = {m: i for i, m in enumerate(MODALITIES)}
MANIFEST_HEADER = ("id", "walk", "condition", "view", "modality", "frames", "path")


@dataclass(frozen=True)
class Condition:
    kind: str = "normal"
    severity: float = 0.0

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}; expected one of {CONDITION_KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError(f"severity must be in [0, 1], got {self.severity}")

    @classmethod
    def parse(cls, text: str) -> "Condition":
        kind, _, sev = text.strip().partition(":")
        return cls(kind, float(sev) if sev else (0.0 if kind == "normal" else 1.0))

    def __str__(self):
        return self.kind if self.kind == "normal" else f"{self.kind}:{self.severity:g}"


@dataclass
class RenderSettings:
    camera: CameraModel = field(default_factory=CameraModel)
    sensor_noise_sigma: float = 0.01
    point_budget: int = 1024


@dataclass
class GaitSequence:
    identity: int
    walk: int
    condition: Condition
    view: int
    modality: str
    frames: list[np.ndarray]
    poses: list[WalkerFrame] | None = None
    settings: RenderSettings = field(default_factory=RenderSettings)
    seed: tuple[int, ...] = ()

    @property
    def sequence_id(self) -> str:
        return f"{self.identity:04d}-{self.walk:02d}-{self.view:03d}-{self.modality}"


def sequence_stream(dataset_seed: int, identity: int, walk: int, view: int, modality: str):
    return stream(dataset_seed, identity, walk, view, MODALITY_CODES[modality])


def render_frames(poses: list[WalkerFrame], modality: str, view: int, settings: RenderSettings,
                  rng: np.random.Generator) -> list[np.ndarray]:
    if modality == "silhouette":
        return [render_silhouette(p, view, camera=settings.camera) for p in poses]
    if modality == "pointcloud":
        return [sample_point_cloud(p, view, settings.sensor_noise_sigma, settings.point_budget, rng)
                for p in poses]
    raise ValueError(f"cannot render modality {modality!r} from poses")


def night_degrade(mask: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    eroded = ndimage.binary_erosion(mask.astype(bool))
    keep = rng.random(mask.shape) >= 0.3 * severity
    return (eroded & keep).astype(np.uint8)


def apply_condition(seq: GaitSequence, condition: Condition, rng_seed: int) -> GaitSequence:
    """Degrade a normal-condition sequence. Geometry changes re-render from poses."""
    if condition.kind not in CONDITION_KINDS:
        raise ValueError(f"unknown condition kind {condition.kind!r}")
    if condition.severity == 0.0 or condition.kind == "normal":
        return replace(seq, condition=condition, frames=[f.copy() for f in seq.frames])
    rng = np.random.default_rng(rng_seed)
    if condition.kind == "night":
        if seq.modality != "silhouette":
            return replace(seq, condition=condition)
        frames = [night_degrade(f, condition.severity, rng) for f in seq.frames]
        return replace(seq, condition=condition, frames=frames)
    if seq.poses is None:
        raise ValueError("geometric conditions need the sequence poses")
    if condition.kind == "clothing":
        poses = [scale_body_radii(p, 1 + 0.4 * condition.severity) for p in seq.poses]
    else:
        poses = [attach_box(p, condition.severity) for p in seq.poses]
    frames = render_frames(poses, seq.modality, seq.view, seq.settings, rng)
    return replace(seq, condition=condition, frames=frames, poses=poses)


def walk_start_time(dataset_seed: int, identity: int, walk: int) -> float:
    return float(stream(dataset_seed, identity, walk, 0x57A).uniform(0.0, 2.0))


def make_sequence(dataset_seed: int, identity: int, walk: int, view: int, modality: str,
                  condition: Condition, n_frames: int, fps: float,
                  settings: RenderSettings | None = None) -> GaitSequence:
    """Render one walk. Both modalities of a walk share its start time."""
    settings = settings or RenderSettings()
    params = sample_identity(dataset_seed, identity)
    t0 = walk_start_time(dataset_seed, identity, walk)
    poses = [pose_at(params, t0 + k / fps) for k in range(n_frames)]
    rng = sequence_stream(dataset_seed, identity, walk, view, modality)
    frames = render_frames(poses, modality, view, settings, rng)
    seq = GaitSequence(identity, walk, Condition(), view, modality, frames, poses, settings,
                       (dataset_seed, identity, walk, view, MODALITY_CODES[modality]))
    if condition.kind != "normal" and condition.severity > 0:
        seq = apply_condition(seq, condition, int(rng.integers(2**63)))
    else:
        seq.condition = condition
    return seq


# -- on-disk dataset ------------------------------------------------------------

@dataclass
class DatasetSpec:
    seed: int = 0
    num_train_ids: int = 24
    num_test_ids: int = 8
    walks: int = 2
    views: tuple[int, ...] = (0, 90, 180, 270)
    conditions: tuple[str, ...] = ("normal", "normal")
    camera_frames: int = 24
    lidar_frames: int = 8
    camera_fps: float = 30.0
    modalities: tuple[str, ...] = ("silhouette", "pointcloud")
    point_budget: int = 1024
    sensor_noise_sigma: float = 0.01

    @property
    def num_identities(self) -> int:
        return self.num_train_ids + self.num_test_ids

    def validate(self) -> None:
        if self.camera_frames != 3 * self.lidar_frames:
            raise ValueError(f"camera_frames ({self.camera_frames}) must be 3 x lidar_frames ({self.lidar_frames})")
        if self.num_train_ids < 1 or self.num_test_ids < 0 or self.walks < 1 or not self.views:
            raise ValueError("dataset needs at least one identity, walk and view")
        for v in self.views:
            if v % 45 or not 0 <= v < 360:
                raise ValueError(f"view {v} not in {{0, 45, ..., 315}}")
        for m in self.modalities:
            if m not in ("silhouette", "pointcloud"):
                raise ValueError(f"generator writes silhouette/pointcloud only, got {m!r}")
        for c in self.conditions:
            Condition.parse(c)

    def condition_for_walk(self, walk: int) -> Condition:
        return Condition.parse(self.conditions[walk % len(self.conditions)])

    def frames_for(self, modality: str) -> tuple[int, float]:
        if modality == "silhouette":
            return self.camera_frames, self.camera_fps
        return self.lidar_frames, self.camera_fps / 3

    def split_of(self, identity: int) -> str:
        return "train" if identity < self.num_train_ids else "test"


def condition_dirname(walk: int, condition: Condition) -> str:
    # walk index keeps two walks under the same condition apart
    return f"{walk:02d}-{condition.kind}"


def write_pgm(path: Path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


def write_xyz(path: Path, points: np.ndarray) -> None:
    buf = io.StringIO()
    np.savetxt(buf, points, fmt="%.6f")
    Path(path).write_text(buf.getvalue())


def read_xyz(path: Path) -> np.ndarray:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.shape[1] != 3:
        raise ValueError(f"{path}: expected 3 columns, got {pts.shape[1]}")
    return pts


def _write_sequence(seq_dir: Path, seq: GaitSequence) -> None:
    seq_dir.mkdir(parents=True)
    for k, frame in enumerate(seq.frames):
        if seq.modality == "pointcloud":
            write_xyz(seq_dir / f"frame_{k:05d}.xyz", frame)
        else:
            write_pgm(seq_dir / f"frame_{k:05d}.pgm", frame * 255 if frame.max() <= 1 else frame)


def generate_dataset(spec: DatasetSpec, out_dir: str | os.PathLike, progress=None) -> Path:
    """Write ``<root>/<id>/<walk-cond>/<view>/<modality>/frame_*.{pgm,xyz}`` and manifest.csv.

    Everything is written to a sibling temp directory which is renamed into place
    on success and removed on failure.
    """
    spec.validate()
    out = Path(out_dir)
    if out.exists():
        raise FileExistsError(f"{out} already exists")
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial-", dir=out.parent))
    try:
        rows = []
        for ident in range(spec.num_identities):
            for walk in range(spec.walks):
                cond = spec.condition_for_walk(walk)
                for view in spec.views:
                    for modality in spec.modalities:
                        n, fps = spec.frames_for(modality)
                        settings = RenderSettings(point_budget=spec.point_budget,
                                                  sensor_noise_sigma=spec.sensor_noise_sigma)
                        seq = make_sequence(spec.seed, ident, walk, view, modality, cond, n, fps, settings)
                        rel = Path(f"{ident:04d}") / condition_dirname(walk, cond) / f"{view:03d}" / modality
                        _write_sequence(tmp / rel, seq)
                        rows.append((ident, walk, cond.kind, view, modality, len(seq.frames), rel.as_posix()))
                if progress:
                    progress(ident, walk)
        with open(tmp / "manifest.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
        (tmp / "dataset.cfg").write_text(dump_section("data", spec))
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


@dataclass(frozen=True)
class ManifestRow:
    id: int
    walk: int
    condition: str
    view: int
    modality: str
    frames: int
    path: str

    @property
    def sequence_id(self) -> str:
        return f"{self.id:04d}-{self.walk:02d}-{self.view:03d}-{self.modality}"


def read_manifest(root: str | os.PathLike) -> list[ManifestRow]:
    path = Path(root) / "manifest.csv"
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        return [ManifestRow(int(r[0]), int(r[1]), r[2], int(r[3]), r[4], int(r[5]), r[6]) for r in reader]


def load_sequence_frames(root: str | os.PathLike, row: ManifestRow) -> list[np.ndarray]:
    seq_dir = Path(root) / row.path
    if row.modality == "pointcloud":
        return [read_xyz(p) for p in sorted(seq_dir.glob("frame_*.xyz"))]
    return [read_pgm(p) for p in sorted(seq_dir.glob("frame_*.pgm"))]


def read_dataset_spec(root: str | os.PathLike) -> DatasetSpec:
    return load_file(Path(root) / "dataset.cfg", {"data": DatasetSpec})["data"]


def load_sequence(root: str | os.PathLike, row: ManifestRow,
                  spec: DatasetSpec | None = None) -> GaitSequence:
    frames = load_sequence_frames(root, row)
    if row.modality == "silhouette":
        frames = [(f > 127).astype(np.uint8) for f in frames]
    if spec is None and (Path(root) / "dataset.cfg").exists():
        spec = read_dataset_spec(root)
    if spec is not None:
        cond = spec.condition_for_walk(row.walk)
    else:
        cond = Condition(row.condition, 0.0 if row.condition == "normal" else 1.0)
    return GaitSequence(row.id, row.walk, cond, row.view, row.modality, frames)
