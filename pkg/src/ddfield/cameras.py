"""Rigid camera poses and the pinhole model.

Poses are stored camera-to-world with the camera looking down its -z axis
(the convention of the transforms files). The 6-vector tangent (omega, u)
parameterizes updates through the SE(3) exponential; optimizer steps compose
in the camera body frame, i.e. exp(xi) left-multiplies the world-to-camera
extrinsic, which keeps the optimization invariant under global rigid remaps
of scene plus cameras.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

F64 = torch.float64


def _hat(w: torch.Tensor) -> torch.Tensor:
    o = torch.zeros(w.shape[:-1] + (3, 3), dtype=w.dtype)
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    o[..., 0, 1], o[..., 0, 2] = -wz, wy
    o[..., 1, 0], o[..., 1, 2] = wz, -wx
    o[..., 2, 0], o[..., 2, 1] = -wy, wx
    return o


def se3_exp(tangent: torch.Tensor):
    """Exponential map: 6-vector (omega, u) -> (R, t). Differentiable in the tangent."""
    tangent = torch.as_tensor(tangent)
    w, u = tangent[..., :3], tangent[..., 3:]
    th2 = (w * w).sum(-1)
    th = torch.sqrt(th2 + 1e-40)
    small = th < 1e-5
    # Rodrigues coefficients with series fallback near zero
    a = torch.where(small, 1.0 - th2 / 6.0, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24.0, (1.0 - torch.cos(th)) / th2.clamp_min(1e-40))
    c = torch.where(small, 1.0 / 6.0 - th2 / 120.0, (1.0 - a) / th2.clamp_min(1e-40))
    K = _hat(w)
    K2 = K @ K
    eye = torch.eye(3, dtype=tangent.dtype).expand(K.shape)
    R = eye + a[..., None, None] * K + b[..., None, None] * K2
    V = eye + b[..., None, None] * K + c[..., None, None] * K2
    t = (V @ u.unsqueeze(-1)).squeeze(-1)
    return R, t


def se3_log(R: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Logarithm map, inverse of se3_exp for ||omega|| < pi."""
    R = torch.as_tensor(R, dtype=F64)
    t = torch.as_tensor(t, dtype=F64)
    cos = ((R.diagonal(dim1=-2, dim2=-1).sum(-1) - 1.0) / 2.0).clamp(-1.0, 1.0)
    th = torch.acos(cos)
    sin = torch.sin(th)
    vee = torch.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        dim=-1,
    )
    small = th < 1e-5
    scale = torch.where(small, 0.5 + th**2 / 12.0, th / (2.0 * sin.clamp_min(1e-40)))
    w = scale[..., None] * vee
    th2 = th * th
    K = _hat(w)
    K2 = K @ K
    a = torch.where(small, 1.0 - th2 / 6.0, torch.sin(th) / th.clamp_min(1e-40))
    b = torch.where(small, 0.5 - th2 / 24.0, (1.0 - torch.cos(th)) / th2.clamp_min(1e-40))
    eye = torch.eye(3, dtype=R.dtype).expand(K.shape)
    # V^{-1} = I - K/2 + (1 - a/(2b))/th^2 * K^2
    coef = torch.where(small, 1.0 / 12.0 + th2 / 720.0, (1.0 - a / (2.0 * b)) / th2.clamp_min(1e-40))
    Vinv = eye - 0.5 * K + coef[..., None, None] * K2
    u = (Vinv @ t.unsqueeze(-1)).squeeze(-1)
    return torch.cat([w, u], dim=-1)


@dataclass
class PoseSE3:
    """Camera-to-world rigid transform with a 6-vector tangent parameterization."""

    rotation: np.ndarray      # (3, 3)
    translation: np.ndarray   # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(self.rotation) < 0:
            raise ValueError(f"rotation is not orthonormal (err {err:.2e})")

    @staticmethod
    def identity() -> "PoseSE3":
        return PoseSE3(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return PoseSE3(m[:3, :3], m[:3, 3])

    @staticmethod
    def exp(tangent) -> "PoseSE3":
        R, t = se3_exp(torch.as_tensor(tangent, dtype=F64))
        return PoseSE3(R.numpy(), t.numpy())

    def log(self) -> np.ndarray:
        return se3_log(torch.as_tensor(self.rotation), torch.as_tensor(self.translation)).numpy()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def update_body(self, tangent) -> "PoseSE3":
        """Apply exp(tangent) in the camera frame: w2c <- exp(xi) @ w2c."""
        step = PoseSE3.exp(np.asarray(tangent, dtype=np.float64))
        return self.compose(step.inverse())

    def rotation_error_deg(self, other: "PoseSE3") -> float:
        cos = (np.trace(self.rotation.T @ other.rotation) - 1.0) / 2.0
        return math.degrees(math.acos(min(1.0, max(-1.0, cos))))

    def translation_error(self, other: "PoseSE3") -> float:
        return float(np.linalg.norm(self.translation - other.translation))


@dataclass
class Camera:
    """Pinhole camera: single focal length in pixels, principal point at center."""

    focal: float
    width: int
    height: int
    pose: PoseSE3
    cx: float = -1.0
    cy: float = -1.0

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if self.cx < 0:
            self.cx = self.width / 2.0
        if self.cy < 0:
            self.cy = self.height / 2.0
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside image")

    @staticmethod
    def from_angle_x(angle_x: float, width: int, height: int, pose: PoseSE3) -> "Camera":
        return Camera(0.5 * width / math.tan(0.5 * angle_x), width, height, pose)

    @property
    def camera_angle_x(self) -> float:
        return 2.0 * math.atan(0.5 * self.width / self.focal)

    def _cam_dirs(self, coords: np.ndarray) -> np.ndarray:
        r, c = coords[..., 0], coords[..., 1]
        d = np.stack([(c - self.cx) / self.focal, -(r - self.cy) / self.focal, -np.ones_like(r)], -1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def rays_at(self, coords) -> tuple[np.ndarray, np.ndarray]:
        """Rays through raw image coordinates (row, col); (cy, cx) maps to the -z axis."""
        coords = np.asarray(coords, dtype=np.float64)
        d = self._cam_dirs(coords) @ self.pose.rotation.T
        o = np.broadcast_to(self.pose.translation, d.shape).copy()
        return o, d

    def rays_for_pixels(self, pixels) -> tuple[np.ndarray, np.ndarray]:
        """Rays through integer pixel centers (row, col)."""
        return self.rays_at(np.asarray(pixels, dtype=np.float64) + 0.5)

    def all_pixels(self) -> np.ndarray:
        r, c = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([r.ravel(), c.ravel()], -1)

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """World points -> (row, col) coordinates and camera-frame depth (+ in front)."""
        q = (np.asarray(points) - self.pose.translation) @ self.pose.rotation
        z = -q[..., 2]
        col = self.cx + self.focal * q[..., 0] / np.where(z == 0, np.inf, z)
        row = self.cy - self.focal * q[..., 1] / np.where(z == 0, np.inf, z)
        return np.stack([row, col], -1), z


def rays_torch(c2w_rot: torch.Tensor, c2w_t: torch.Tensor, cam: Camera, pixels: torch.Tensor):
    """Differentiable ray generation for pixel centers under a torch pose."""
    coords = pixels.to(c2w_rot.dtype) + 0.5
    r, c = coords[..., 0], coords[..., 1]
    d = torch.stack(
        [(c - cam.cx) / cam.focal, -(r - cam.cy) / cam.focal, -torch.ones_like(r)], -1
    )
    d = d / torch.linalg.vector_norm(d, dim=-1, keepdim=True)
    dirs = d @ c2w_rot.T
    origins = c2w_t.expand_as(dirs)
    return origins, dirs


def project_torch(w2c_rot: torch.Tensor, w2c_t: torch.Tensor, cam: Camera, points: torch.Tensor):
    """Differentiable projection of world points -> (row, col), camera depth."""
    q = points @ w2c_rot.T + w2c_t
    z = -q[..., 2]
    zs = torch.clamp(z, min=1e-9)
    col = cam.cx + cam.focal * q[..., 0] / zs
    row = cam.cy - cam.focal * q[..., 1] / zs
    return torch.stack([row, col], -1), z


def look_at_pose(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> PoseSE3:
    """Camera at eye looking toward target (camera -z axis points at the target)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    n = np.linalg.norm(right)
    if n < 1e-9:  # looking straight along up: pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(right)
    right /= n
    true_up = np.cross(right, fwd)
    R = np.stack([right, true_up, -fwd], axis=1)
    return PoseSE3(R, eye)
