"""Parametric walker: identity sampling and sinusoidal gait kinematics.

Body frame: x forward (walking direction), y to the walker's left, z up, meters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

PARAM_RANGES = {
    "body_height": (1.50, 1.90),
    "torso_radius": (0.10, 0.18),
    "head_radius": (0.08, 0.12),
    "leg_length_ratio": (0.45, 0.55),
    "arm_swing_amplitude": (0.2, 0.6),
    "hip_swing_amplitude": (0.3, 0.7),
    "stride_frequency": (0.7, 1.2),
    "phase_offset": (0.0, 2 * math.pi),
}

JOINTS = (
    "head", "neck", "pelvis", "hip_l", "hip_r", "knee_l", "knee_r", "ankle_l", "ankle_r",
    "shoulder_l", "shoulder_r", "elbow_l", "elbow_r", "wrist_l", "wrist_r",
)

# (joint a, joint b, radius as a fraction of torso radius); the head uses head_radius
LIMBS = (
    ("torso", "pelvis", "neck", 1.0),
    ("shoulders", "shoulder_l", "shoulder_r", 0.45),
    ("hips", "hip_l", "hip_r", 0.6),
    ("thigh_l", "hip_l", "knee_l", 0.5),
    ("thigh_r", "hip_r", "knee_r", 0.5),
    ("shank_l", "knee_l", "ankle_l", 0.38),
    ("shank_r", "knee_r", "ankle_r", 0.38),
    ("upper_arm_l", "shoulder_l", "elbow_l", 0.32),
    ("upper_arm_r", "shoulder_r", "elbow_r", 0.32),
    ("forearm_l", "elbow_l", "wrist_l", 0.27),
    ("forearm_r", "elbow_r", "wrist_r", 0.27),
)

NECK_GAP = 0.03
ELBOW_FLEX = 0.3


@dataclass(frozen=True)
class IdentityParams:
    body_height: float
    torso_radius: float
    head_radius: float
    leg_length_ratio: float
    arm_swing_amplitude: float
    hip_swing_amplitude: float
    stride_frequency: float
    phase_offset: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)])

    @property
    def leg_length(self) -> float:
        return self.leg_length_ratio * self.body_height


def stream(*keys: int) -> np.random.Generator:
    """Independent generator keyed by a tuple of non-negative ints."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def sample_identity(dataset_seed: int, identity_index: int) -> IdentityParams:
    if identity_index < 0:
        raise ValueError("identity_index must be non-negative")
    rng = stream(dataset_seed, identity_index, 0x1D)
    # uniform() is half-open, so phase_offset stays below 2*pi
    return IdentityParams(**{name: float(rng.uniform(lo, hi)) for name, (lo, hi) in PARAM_RANGES.items()})


@dataclass
class Capsule:
    a: str
    b: str
    radius: float
    name: str = ""


@dataclass
class WalkerFrame:
    joints: dict[str, np.ndarray]
    capsules: list[Capsule] = field(default_factory=list)

    def segment_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = np.array([self.joints[c.a] for c in self.capsules], dtype=np.float64)
        b = np.array([self.joints[c.b] for c in self.capsules], dtype=np.float64)
        r = np.array([c.radius for c in self.capsules], dtype=np.float64)
        return a, b, r

    def segment_length(self, a: str, b: str) -> float:
        return float(np.linalg.norm(self.joints[a] - self.joints[b]))

    def copy(self) -> "WalkerFrame":
        return WalkerFrame({k: v.copy() for k, v in self.joints.items()},
                           [Capsule(c.a, c.b, c.radius, c.name) for c in self.capsules])


def joint_angles(identity: IdentityParams, time_sec: float) -> dict[str, float]:
    """Hip/knee/shoulder angles in radians; positive hip and shoulder angles swing forward."""
    psi = 2 * math.pi * identity.stride_frequency * time_sec + identity.phase_offset
    s, c = math.sin(psi), math.cos(psi)
    hip = identity.hip_swing_amplitude * s
    knee_gain = 1.2 * identity.hip_swing_amplitude
    arm = identity.arm_swing_amplitude * s
    return {
        "hip_l": hip,
        "hip_r": -hip,
        # knee flexes while its leg swings forward
        "knee_l": knee_gain * max(0.0, c),
        "knee_r": knee_gain * max(0.0, -c),
        "shoulder_l": -arm,
        "shoulder_r": arm,
    }


def _sagittal(angle: float) -> np.ndarray:
    return np.array([math.sin(angle), 0.0, -math.cos(angle)])


def pose_at(identity: IdentityParams, time_sec: float) -> WalkerFrame:
    if time_sec < 0:
        raise ValueError("time_sec must be non-negative")
    h = identity.body_height
    rt = identity.torso_radius
    leg = identity.leg_length
    thigh = shank = leg / 2
    upper_arm, forearm = 0.18 * h, 0.16 * h
    ang = joint_angles(identity, time_sec)

    speed = 2 * leg * math.sin(identity.hip_swing_amplitude) * identity.stride_frequency
    # stance leg keeps the pelvis at leg*cos(hip angle)
    pelvis = np.array([speed * time_sec, 0.0, leg * math.cos(ang["hip_l"])])
    neck = pelvis + np.array([0.0, 0.0, h - 2 * identity.head_radius - NECK_GAP - leg])
    head = neck + np.array([0.0, 0.0, identity.head_radius + NECK_GAP])
    hip_off = np.array([0.0, 0.6 * rt, 0.0])
    sh_off = np.array([0.0, 1.4 * rt + 0.02, -0.03])

    j = {"pelvis": pelvis, "neck": neck, "head": head}
    for side, sign in (("l", 1.0), ("r", -1.0)):
        hip = pelvis + sign * hip_off
        hip_a = ang[f"hip_{side}"]
        knee = hip + thigh * _sagittal(hip_a)
        ankle = knee + shank * _sagittal(hip_a - ang[f"knee_{side}"])
        shoulder = neck + np.array([0.0, sign * sh_off[1], sh_off[2]])
        sh_a = ang[f"shoulder_{side}"]
        elbow = shoulder + upper_arm * _sagittal(sh_a)
        wrist = elbow + forearm * _sagittal(sh_a + ELBOW_FLEX)
        j.update({f"hip_{side}": hip, f"knee_{side}": knee, f"ankle_{side}": ankle,
                  f"shoulder_{side}": shoulder, f"elbow_{side}": elbow, f"wrist_{side}": wrist})

    caps = [Capsule("head", "head", identity.head_radius, "head")]
    caps += [Capsule(a, b, frac * rt, name) for name, a, b, frac in LIMBS]
    return WalkerFrame(j, caps)


def scale_body_radii(frame: WalkerFrame, factor: float) -> WalkerFrame:
    """Clothing: inflate torso and limb capsules, keep the head."""
    out = frame.copy()
    for c in out.capsules:
        if c.name != "head":
            c.radius *= factor
    return out


def attach_box(frame: WalkerFrame, severity: float, side: str = "r") -> WalkerFrame:
    """Carrying: a rigid bag capsule hanging from one wrist."""
    out = frame.copy()
    wrist = out.joints[f"wrist_{side}"]
    lateral = -0.06 if side == "r" else 0.06
    top = wrist + np.array([0.0, lateral, -0.04])
    out.joints["box_top"] = top
    out.joints["box_bottom"] = top + np.array([0.0, 0.0, -0.32 * severity])
    out.capsules.append(Capsule("box_top", "box_bottom", 0.05 + 0.06 * severity, "box"))
    return out
