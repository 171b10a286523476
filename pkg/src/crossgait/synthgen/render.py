"""Orthographic silhouette rasterization and surface point sampling of capsule bodies."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .walker import WalkerFrame

PIXEL_SIZE = 2.2 / 128  # meters per silhouette pixel
GROUND_MARGIN = 0.25


class FrameError(ValueError):
    """The walker does not fit inside the camera frame."""


def view_axes(view_angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """(toward_sensor, image_right) unit vectors for a sensor at ``view_angle_deg``.

    0 deg puts the sensor in front of the walker (on +x); 90 deg on its left (+y).
    """
    a = math.radians(view_angle_deg)
    toward = np.array([math.cos(a), math.sin(a), 0.0])
    right = np.array([-math.sin(a), math.cos(a), 0.0])
    return toward, right


@dataclass(frozen=True)
class CameraModel:
    image_h: int = 128
    image_w: int = 96
    pixel_size: float = PIXEL_SIZE
    bottom: float = -GROUND_MARGIN

    @property
    def extent_w(self) -> float:
        return self.image_w * self.pixel_size

    @property
    def extent_h(self) -> float:
        return self.image_h * self.pixel_size


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    dx, dy = b[0] - a[0], b[1] - a[1]
    denom = dx * dx + dy * dy
    if denom == 0.0:
        t = 0.0
    else:
        t = np.clip(((px - a[0]) * dx + (py - a[1]) * dy) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * dx), py - (a[1] + t * dy))


def render_silhouette(frame: WalkerFrame, view_angle_deg: float, image_h: int = 128,
                      image_w: int = 96, camera: CameraModel | None = None) -> np.ndarray:
    """Binary (uint8 0/1) mask of the union of projected capsules.

    The camera pans with the pelvis so the walker stays horizontally centered.
    """
    cam = camera or CameraModel(image_h, image_w)
    _, right = view_axes(view_angle_deg)
    a3, b3, radii = frame.segment_arrays()
    center_u = float(frame.joints["pelvis"] @ right)
    ua, ub = a3 @ right - center_u, b3 @ right - center_u
    va, vb = a3[:, 2], b3[:, 2]

    half_w = cam.extent_w / 2
    top = cam.bottom + cam.extent_h
    lo_u = float((np.minimum(ua, ub) - radii).min())
    hi_u = float((np.maximum(ua, ub) + radii).max())
    lo_v = float((np.minimum(va, vb) - radii).min())
    hi_v = float((np.maximum(va, vb) + radii).max())
    if lo_u < -half_w or hi_u > half_w or lo_v < cam.bottom or hi_v > top:
        raise FrameError(
            f"walker bbox u=[{lo_u:.3f},{hi_u:.3f}] v=[{lo_v:.3f},{hi_v:.3f}] exceeds "
            f"frame u=[{-half_w:.3f},{half_w:.3f}] v=[{cam.bottom:.3f},{top:.3f}]")

    us = (np.arange(cam.image_w) + 0.5) * cam.pixel_size - half_w
    vs = top - (np.arange(cam.image_h) + 0.5) * cam.pixel_size
    mask = np.zeros((cam.image_h, cam.image_w), dtype=bool)
    for k in range(len(radii)):
        r = radii[k]
        # rasterize only inside the capsule's bounding box
        c0 = max(int(np.searchsorted(us, min(ua[k], ub[k]) - r)), 0)
        c1 = int(np.searchsorted(us, max(ua[k], ub[k]) + r, side="right"))
        r0 = max(int(np.searchsorted(-vs, -(max(va[k], vb[k]) + r))), 0)
        r1 = int(np.searchsorted(-vs, -(min(va[k], vb[k]) - r), side="right"))
        if c1 <= c0 or r1 <= r0:
            continue
        gu, gv = np.meshgrid(us[c0:c1], vs[r0:r1])
        d = _segment_distance(gu, gv, (ua[k], va[k]), (ub[k], vb[k]))
        mask[r0:r1, c0:c1] |= d <= r
    return mask.astype(np.uint8)


def _orthonormal(e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(e[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    n1 = np.cross(e, helper)
    n1 /= np.linalg.norm(n1)
    return n1, np.cross(e, n1)


def _sample_capsule_surface(a, b, r, count, rng) -> tuple[np.ndarray, np.ndarray]:
    axis = b - a
    length = float(np.linalg.norm(axis))
    side_area = 2 * math.pi * r * length
    cap_area = 4 * math.pi * r * r
    on_side = rng.random(count) < side_area / (side_area + cap_area)
    pts = np.empty((count, 3))
    nrm = np.empty((count, 3))
    n_side = int(on_side.sum())
    if n_side:
        e = axis / length
        n1, n2 = _orthonormal(e)
        phi = rng.uniform(0, 2 * math.pi, n_side)
        t = rng.random(n_side)
        normal = np.outer(np.cos(phi), n1) + np.outer(np.sin(phi), n2)
        pts[on_side] = a + np.outer(t, axis) + r * normal
        nrm[on_side] = normal
    n_cap = count - n_side
    if n_cap:
        s = rng.normal(size=(n_cap, 3))
        s /= np.linalg.norm(s, axis=1, keepdims=True)
        if length > 0:
            upper = (s @ (axis / length)) >= 0
            centers = np.where(upper[:, None], b, a)
        else:
            centers = np.broadcast_to(a, (n_cap, 3))
        pts[~on_side] = centers + r * s
        nrm[~on_side] = s
    return pts, nrm


def sample_point_cloud(frame: WalkerFrame, view_angle_deg: float, sensor_noise_sigma: float,
                       point_budget: int, rng_seed: int | np.random.Generator) -> np.ndarray:
    """Exactly ``point_budget`` surface points facing the sensor, area-uniform, plus noise."""
    if not 256 <= point_budget <= 1024:
        raise ValueError(f"point_budget must be in [256, 1024], got {point_budget}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    toward, _ = view_axes(view_angle_deg)
    a3, b3, radii = frame.segment_arrays()
    lengths = np.linalg.norm(b3 - a3, axis=1)
    areas = 2 * math.pi * radii * lengths + 4 * math.pi * radii ** 2
    probs = areas / areas.sum()

    kept: list[np.ndarray] = []
    have = 0
    while have < point_budget:
        # half the candidates face away, hence the 2x oversample
        draw = 2 * (point_budget - have) + 32
        counts = rng.multinomial(draw, probs)
        for k, n in enumerate(counts):
            if n == 0:
                continue
            p, nrm = _sample_capsule_surface(a3[k], b3[k], radii[k], int(n), rng)
            vis = p[(nrm @ toward) > 0]
            kept.append(vis)
            have += len(vis)
    # shuffle before truncating so no capsule is systematically cut
    pts = rng.permutation(np.concatenate(kept))[:point_budget]
    if sensor_noise_sigma > 0:
        pts = pts + rng.normal(scale=sensor_noise_sigma, size=pts.shape)
    return pts
