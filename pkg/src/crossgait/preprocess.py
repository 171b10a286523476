"""Turn raw silhouettes and point clouds into aligned 64x64 network inputs."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .synthgen.dataset import GaitSequence
from .synthgen.render import view_axes

OUT_SIZE = 64
MIN_PIXELS = 16
# depth of the farthest body point after normalization; background stays 0
DEPTH_FLOOR = 0.2


class DegenerateFrameError(ValueError):
    pass


class SequenceRejected(ValueError):
    pass


@dataclass(frozen=True)
class SensorModel:
    view_angle_deg: float = 0.0
    image_h: int = 64
    image_w: int = 64
    extent_h: float = 2.2
    extent_w: float = 2.2
    center_u: float = 0.0
    center_v: float = 0.85

    def __post_init__(self):
        if self.image_h <= 0 or self.image_w <= 0 or self.extent_h <= 0 or self.extent_w <= 0:
            raise ValueError("sensor extents must be positive")

    def centered_on(self, points: np.ndarray) -> "SensorModel":
        """Same sensor, image plane re-centered horizontally on the cloud."""
        _, right = view_axes(self.view_angle_deg)
        return replace(self, center_u=float(np.mean(points @ right)))


def project_points_to_depth(points: np.ndarray, sensor: SensorModel) -> np.ndarray:
    """Orthographic z-buffered depth image; nearest point -> 1, farthest -> DEPTH_FLOOR."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"expected a non-empty N x 3 cloud, got shape {pts.shape}")
    toward, right = view_axes(sensor.view_angle_deg)
    u = pts @ right - sensor.center_u
    v = pts[:, 2] - sensor.center_v
    depth = -(pts @ toward)
    col = np.floor((u / sensor.extent_w + 0.5) * sensor.image_w).astype(np.int64)
    row = np.floor((0.5 - v / sensor.extent_h) * sensor.image_h).astype(np.int64)
    inside = (col >= 0) & (col < sensor.image_w) & (row >= 0) & (row < sensor.image_h)
    if not inside.any():
        raise ValueError("all points fall outside the sensor extent")
    row, col, depth = row[inside], col[inside], depth[inside]

    pix = row * sensor.image_w + col
    order = np.lexsort((depth, pix))
    pix, depth = pix[order], depth[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]

    dmin, dmax = depth.min(), depth.max()
    if dmax > dmin:
        val = 1.0 - (1 - DEPTH_FLOOR) * (depth[first] - dmin) / (dmax - dmin)
    else:
        val = np.ones(int(first.sum()))
    img = np.zeros(sensor.image_h * sensor.image_w)
    img[pix[first]] = val
    return img.reshape(sensor.image_h, sensor.image_w)


def _resize(img: np.ndarray, out_h: int, out_w: int, order: int) -> np.ndarray:
    h, w = img.shape
    # pixel-center aligned sampling grid
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img.astype(np.float64), [gy, gx], order=order, mode="nearest")


def _align(support: np.ndarray, values: np.ndarray | None, min_pixels: int) -> np.ndarray:
    ys, xs = np.nonzero(support)
    if len(ys) < min_pixels:
        raise DegenerateFrameError(f"frame has {len(ys)} foreground pixels (< {min_pixels})")
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    h, w = y1 - y0, x1 - x0
    new_w = max(1, int(round(w * OUT_SIZE / h)))
    crop = support[y0:y1, x0:x1]
    mask = _resize(crop, OUT_SIZE, new_w, 0) >= 0.5
    if values is None:
        img = mask.astype(np.float64)
    else:
        # bilinear values renormalized by bilinear support, so edges keep their depth
        num = _resize(np.where(crop, values[y0:y1, x0:x1], 0.0), OUT_SIZE, new_w, 1)
        den = _resize(crop.astype(np.float64), OUT_SIZE, new_w, 1)
        near = _resize(values[y0:y1, x0:x1], OUT_SIZE, new_w, 0)
        ratio = np.divide(num, den, out=near.copy(), where=den > 1e-9)
        img = np.where(mask, np.clip(ratio, 0.0, 1.0), 0.0)
    cols = np.nonzero(mask)[1]
    # pixel centers sit at index + 0.5, so a mask spanning [a, b) is centered at (a + b) / 2
    com = cols.mean() + 0.5 if len(cols) else new_w / 2
    shift = int(np.floor(OUT_SIZE / 2 - com + 0.5))
    out = np.zeros((OUT_SIZE, OUT_SIZE))
    src0 = max(0, -shift)
    src1 = min(new_w, OUT_SIZE - shift)
    if src1 > src0:
        out[:, src0 + shift:src1 + shift] = img[:, src0:src1]
    return out


def normalize_silhouette(mask: np.ndarray, min_pixels: int = MIN_PIXELS) -> np.ndarray:
    """Crop to the person, scale to 64 rows, center the column mass at 32; output in {0,1}."""
    return _align(np.asarray(mask) > 0, None, min_pixels)


def normalize_depth_frame(depth: np.ndarray, min_pixels: int = MIN_PIXELS) -> np.ndarray:
    """Same alignment as silhouettes, but depth values are resampled bilinearly."""
    depth = np.asarray(depth, dtype=np.float64)
    return _align(depth > 0, depth, min_pixels)


def preprocess_frames(frames, modality: str, view: int, sensor: SensorModel | None = None,
                      min_pixels: int = MIN_PIXELS) -> np.ndarray:
    base = sensor or SensorModel(view_angle_deg=view)
    out = []
    for frame in frames:
        try:
            if modality == "silhouette":
                out.append(normalize_silhouette(frame, min_pixels))
            elif modality == "pointcloud":
                depth = project_points_to_depth(frame, base.centered_on(frame))
                out.append(normalize_depth_frame(depth, min_pixels))
            elif modality == "depth":
                out.append(normalize_depth_frame(frame, min_pixels))
            else:
                raise ValueError(f"unknown modality {modality!r}")
        except DegenerateFrameError:
            continue
    if len(out) < 2:
        raise SequenceRejected(f"only {len(out)} valid frame(s) in a {len(frames)}-frame sequence")
    return np.stack(out)[:, None].astype(np.float32)


def preprocess_sequence(seq: GaitSequence, sensor: SensorModel | None = None,
                        min_pixels: int = MIN_PIXELS) -> np.ndarray:
    """Stack normalized frames into a (T, 1, 64, 64) float32 array, dropping degenerate ones."""
    return preprocess_frames(seq.frames, seq.modality, seq.view, sensor, min_pixels)
