"""Desk-scale scene and rig presets.

Resolution defaults to 64x48 with 40 frames; cameras sit about a metre above
a gently undulating floor and look down at roughly 45 degrees.
"""

from .geometry import Intrinsics
from .synthetic import BoxSpec, CameraRigSpec, CameraSpec, SceneSpec, TerrainSpec

PRESETS = ("overlap", "non-overlap", "robo-arm-like", "three-camera")


def default_intrinsics(width=64, height=48):
    f = 56.0 * width / 64.0
    return Intrinsics(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def make_scene(preset, duration=40):
    box = BoxSpec()
    if preset == "robo-arm-like":
        # digging motion: mostly vertical
        box = BoxSpec(size=(0.2, 0.2, 0.3), base=(0.0, 0.35, 0.25), amplitude=(0.05, 0.0, 0.12), period=20.0)
    return SceneSpec(terrain=TerrainSpec(amplitude=0.1, frequency=4.0, seed=3), dynamic_object=box, duration=duration)


def make_rig(preset, width=64, height=48):
    K = default_intrinsics(width, height)
    if preset == "overlap":
        cams = (
            CameraSpec(K, ((-0.45, -1.0, 1.0), (-0.2, -1.05, 1.05), (0.05, -0.95, 1.0)), ((-0.1, 0.25, 0.0), (0.0, 0.3, 0.0), (0.1, 0.25, 0.0))),
            CameraSpec(K, ((-0.1, -1.1, 1.0), (0.15, -1.0, 0.95), (0.4, -1.05, 1.0)), ((0.0, 0.3, 0.0), (0.1, 0.25, 0.0), (0.2, 0.3, 0.0))),
        )
        return CameraRigSpec(cams, "overlapping")
    if preset == "non-overlap":
        cams = (
            CameraSpec(K, ((-0.3, -0.2, 1.0), (0.0, -0.25, 1.05), (0.3, -0.2, 1.0)), ((-0.2, 1.0, 0.0), (0.0, 1.0, 0.0), (0.2, 1.0, 0.0))),
            CameraSpec(K, ((0.3, 0.2, 1.0), (0.0, 0.25, 0.95), (-0.3, 0.2, 1.0)), ((0.2, -1.0, 0.0), (0.0, -1.0, 0.0), (-0.2, -1.0, 0.0))),
        )
        return CameraRigSpec(cams, "non-overlapping")
    if preset == "robo-arm-like":
        cams = (
            CameraSpec(K, ((-0.3, -0.9, 1.0), (-0.2, -0.95, 1.0)), ((0.0, 0.35, 0.0), (0.05, 0.35, 0.0))),
            CameraSpec(K, ((0.25, -0.95, 1.0), (0.35, -0.9, 1.0)), ((0.0, 0.35, 0.0), (0.05, 0.35, 0.0))),
        )
        return CameraRigSpec(cams, "overlapping")
    if preset == "three-camera":
        cams = (
            CameraSpec(K, ((-0.45, -1.0, 1.0), (-0.2, -1.05, 1.05), (0.05, -0.95, 1.0)), ((-0.1, 0.25, 0.0), (0.0, 0.3, 0.0), (0.1, 0.25, 0.0))),
            CameraSpec(K, ((-0.1, -1.1, 1.0), (0.15, -1.0, 0.95), (0.4, -1.05, 1.0)), ((0.0, 0.3, 0.0), (0.1, 0.25, 0.0), (0.2, 0.3, 0.0))),
            CameraSpec(K, ((0.3, -0.95, 1.05), (0.1, -1.0, 1.0), (-0.15, -1.05, 1.0)), ((0.15, 0.3, 0.0), (0.05, 0.3, 0.0), (-0.05, 0.25, 0.0))),
        )
        return CameraRigSpec(cams, "overlapping")
    raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
