"""Binary payload codecs for the pose and point-cloud schemas."""

from __future__ import annotations

import struct

import numpy as np

from fleetsim.scenario.motion import Pose

_POSE = struct.Struct("<iqddd")
_CLOUD_HEADER = struct.Struct("<iqI")

POSE_TAG = "pose"
CLOUD_TAG = "pointcloud"


def encode_pose(pose: Pose) -> bytes:
    return _POSE.pack(pose.vehicle_id, pose.t, pose.x, pose.y, pose.heading)


def decode_pose(payload: bytes) -> Pose:
    if len(payload) != _POSE.size:
        raise ValueError(f"pose payload must be {_POSE.size} bytes, got {len(payload)}")
    return Pose(*_POSE.unpack(payload))


class PointCloud:
    __slots__ = ("vehicle_id", "t", "points")

    def __init__(self, vehicle_id: int, t: int, points: np.ndarray) -> None:
        self.vehicle_id = vehicle_id
        self.t = t
        self.points = points

    def encode(self) -> bytes:
        pts = np.ascontiguousarray(self.points, dtype="<f4")
        return _CLOUD_HEADER.pack(self.vehicle_id, self.t, len(pts)) + pts.tobytes()

    @classmethod
    def decode(cls, payload: bytes) -> PointCloud:
        vid, t, n = _CLOUD_HEADER.unpack_from(payload)
        pts = np.frombuffer(payload, dtype="<f4", offset=_CLOUD_HEADER.size)
        if pts.size != 3 * n:
            raise ValueError("point cloud payload length does not match its header")
        return cls(vid, t, pts.reshape(n, 3))


def synth_cloud(vehicle_id: int, t: int, seed: int, points_per_cloud: int, lidar_ids=None) -> PointCloud:
    """Deterministic pseudo-random cloud keyed by ``(seed, vehicle_id, t)``."""
    if lidar_ids is not None and vehicle_id not in lidar_ids:
        raise ValueError(f"vehicle {vehicle_id} has no lidar")
    rng = np.random.default_rng([seed, vehicle_id, t])
    pts = rng.uniform(-50.0, 50.0, size=(points_per_cloud, 3)).astype("<f4")
    pts[:, 2] *= 0.05
    return PointCloud(vehicle_id, t, pts)
