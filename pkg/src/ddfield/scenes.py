"""Ground-truth engine on analytic density scenes.

Everything here is brute force and float64: volumetric depth by dense
quadrature, distance by direction search, numerical verification of the
distance/density conversion identity, and synthetic dataset generation.
No neural network is involved; this module is the oracle the field is
tested against.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import Camera, PoseSE3, look_at_pose

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


# -- primitives ----------------------------------------------------------------


@dataclass
class Sphere:
    """Uniform-density ball."""

    center: tuple
    radius: float
    density: float
    albedo: tuple = (0.8, 0.8, 0.8)

    def sigma(self, p):
        r2 = ((p - np.asarray(self.center)) ** 2).sum(-1)
        return np.where(r2 <= self.radius**2, self.density, 0.0)

    def normal(self, p):
        d = p - np.asarray(self.center)
        return d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)

    def extent(self):
        return np.linalg.norm(self.center) + self.radius


@dataclass
class Slab:
    """Axis-aligned layer between two planes."""

    axis: int
    lo: float
    hi: float
    density: float
    albedo: tuple = (0.8, 0.8, 0.8)

    def sigma(self, p):
        x = p[..., self.axis]
        return np.where((x >= self.lo) & (x <= self.hi), self.density, 0.0)

    def normal(self, p):
        n = np.zeros_like(p)
        sign = np.sign(p[..., self.axis] - 0.5 * (self.lo + self.hi))
        n[..., self.axis] = np.where(sign == 0, 1.0, sign)
        return n

    def extent(self):
        return max(abs(self.lo), abs(self.hi))


@dataclass
class GaussianBlob:
    """Isotropic Gaussian density bump (smoke)."""

    center: tuple
    spread: float
    density: float
    albedo: tuple = (0.9, 0.9, 0.9)

    def sigma(self, p):
        r2 = ((p - np.asarray(self.center)) ** 2).sum(-1)
        return self.density * np.exp(-0.5 * r2 / self.spread**2)

    def normal(self, p):
        d = p - np.asarray(self.center)
        return d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-12)

    def extent(self):
        return np.linalg.norm(self.center) + 4.0 * self.spread


@dataclass
class AnalyticScene:
    """Closed-form density: sum over primitives, optionally capped at sigma_max."""

    primitives: list
    sigma_max: float = math.inf
    light_dir: tuple = (0.37, 0.26, 0.89)

    def __post_init__(self):
        l = np.asarray(self.light_dir, dtype=np.float64)
        self.light_dir = tuple(l / np.linalg.norm(l))

    def density(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        out = np.zeros(p.shape[:-1])
        for prim in self.primitives:
            out += prim.sigma(p)
        return np.minimum(out, self.sigma_max)

    def color(self, p) -> np.ndarray:
        """Density-weighted albedo with a fixed directional light, no shadows."""
        p = np.asarray(p, dtype=np.float64)
        num = np.zeros(p.shape[:-1] + (3,))
        den = np.zeros(p.shape[:-1])
        light = np.asarray(self.light_dir)
        for prim in self.primitives:
            s = prim.sigma(p)
            lam = 0.55 + 0.45 * np.clip((prim.normal(p) * light).sum(-1), 0.0, 1.0)
            num += (s * lam)[..., None] * np.asarray(prim.albedo)
            den += s
        return num / np.maximum(den, 1e-12)[..., None]

    def extent(self) -> float:
        return max((prim.extent() for prim in self.primitives), default=1.0)


def analytic_density(scene: AnalyticScene, p) -> np.ndarray:
    return scene.density(p)


# -- volumetric depth ------------------------------------------------------------


def depth_batch(scene, origins, dirs, t_n, t_f, n):
    """Volumetric depth for a batch of rays.

    Transmittance comes from a composite-trapezoid running integral of the
    density; the depth integral is accumulated as absorbed-mass-per-bin times
    bin midpoint, which stays accurate in the hard-surface limit where the
    plain trapezoid on t*T*sigma diverges.

    Returns (depth, transmittance_at_t_f, truncated_flag).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    t = np.linspace(t_n, t_f, n)
    pts = origins[:, None, :] + t[None, :, None] * dirs[:, None, :]
    sig = scene.density(pts.reshape(-1, 3)).reshape(origins.shape[0], n)
    dt = t[1] - t[0]
    tau = np.concatenate(
        [np.zeros((sig.shape[0], 1)), np.cumsum(0.5 * (sig[:, 1:] + sig[:, :-1]) * dt, axis=1)],
        axis=1,
    )
    T = np.exp(-tau)
    absorbed = T[:, :-1] - T[:, 1:]
    mid = 0.5 * (t[:-1] + t[1:])
    depth = t_n + (absorbed * mid).sum(1)
    T_end = T[:, -1]
    nonvacuum = sig.max(axis=1) > 0
    truncated = (T_end >= 0.01) & nonvacuum
    return depth, T_end, truncated


def depth_by_quadrature(scene, p, v, t_n=0.01, t_f=4.0, n=512):
    """Volumetric depth along one ray; see depth_batch. Requires n >= 100."""
    if n < 100:
        raise ValueError("quadrature needs n >= 100")
    d, _, trunc = depth_batch(scene, p, v, t_n, t_f, n)
    return float(d[0]), bool(trunc[0])


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = math.pi * (1.0 + math.sqrt(5.0)) * i
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], -1)


def _frame(v):
    a = np.array([1.0, 0.0, 0.0]) if abs(v[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(v, a)
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True) if e1.ndim > 1 else np.linalg.norm(e1)
    e2 = np.cross(v, e1)
    return e1, e2


def _rotate_towards(v, axis, theta):
    return v * np.cos(theta)[..., None] + axis * np.sin(theta)[..., None]


def _refine_directions(scene, points, v0, t_n, t_f, n_quad, span, rounds=2, iters=14):
    """Golden-section refinement of the depth minimum over direction, batched.

    points: (B, 3); v0: (B, 3) initial directions. Coordinate descent over two
    tangent angles; escaping rays are penalized so the refinement stays inside
    the absorbing cone.
    """
    points = np.atleast_2d(points)
    v = np.array(np.atleast_2d(v0), dtype=np.float64)
    B = points.shape[0]

    def depth_of(dirs):
        d, T_end, _ = depth_batch(scene, points, dirs, t_n, t_f, n_quad)
        return np.where(T_end < 0.01, d, 1e9)

    for _ in range(rounds):
        for ax in range(2):
            frames = np.stack([np.stack(_frame(v[i]), 0)[ax] for i in range(B)], 0)
            lo, hi = np.full(B, -span), np.full(B, span)
            x1 = hi - GOLDEN * (hi - lo)
            x2 = lo + GOLDEN * (hi - lo)
            f1 = depth_of(_rotate_towards(v, frames, x1))
            f2 = depth_of(_rotate_towards(v, frames, x2))
            for _ in range(iters):
                take1 = f1 < f2
                hi = np.where(take1, x2, hi)
                lo = np.where(take1, lo, x1)
                x1n = hi - GOLDEN * (hi - lo)
                x2n = lo + GOLDEN * (hi - lo)
                new1 = np.where(take1, x1n, x2n)
                fn = depth_of(_rotate_towards(v, frames, new1))
                x1, f1, x2, f2 = (
                    np.where(take1, x1n, x2),
                    np.where(take1, fn, f2),
                    np.where(take1, x1, x2n),
                    np.where(take1, f1, fn),
                )
            best = np.where(f1 < f2, x1, x2)
            v = _rotate_towards(v, frames, best)
            v /= np.linalg.norm(v, axis=-1, keepdims=True)
    d, T_end, trunc = depth_batch(scene, points, v, t_n, t_f, n_quad)
    return d, v, T_end


def distance_by_direction_search(
    scene, p, n_dirs=256, t_n=0.005, t_f=None, n_quad=512, refine_quad=4096
):
    """Distance = minimum volumetric depth over directions (coarse set + refinement).

    Directions whose ray escapes (transmittance at t_f >= 0.01) do not absorb
    and are excluded from the minimum. Returns (D, argmin_dir, valid).
    """
    if n_dirs < 64:
        raise ValueError("direction search needs n_dirs >= 64")
    p = np.asarray(p, dtype=np.float64)
    if t_f is None:
        t_f = float(np.linalg.norm(p) + 2.5 * scene.extent())
    dirs = fibonacci_directions(n_dirs)
    d, T_end, _ = depth_batch(scene, np.broadcast_to(p, dirs.shape), dirs, t_n, t_f, n_quad)
    absorbing = T_end < 0.01
    if not absorbing.any():
        return float(d.min()), dirs[int(d.argmin())], False
    d = np.where(absorbing, d, 1e9)
    v0 = dirs[int(d.argmin())]
    span = 1.4 * math.sqrt(4.0 * math.pi / n_dirs)
    dref, vref, T_end = _refine_directions(scene, p[None], v0[None], t_n, t_f, refine_quad, span)
    if dref[0] <= d.min():
        return float(dref[0]), vref[0], True
    return float(d.min()), v0, True


def _direction_sweep(scene, p, t_n, t_f, n_dirs=256, n_quad=512, min_angle=0.7):
    """Coarse direction statistics at p: best direction, spread, second-basin gap.

    spread = max/min depth over absorbing directions (≈1 deep inside a uniform
    medium, where the argmin is ill-conditioned but the field is smooth);
    gap = depth ratio between the best direction and the best one separated by
    more than min_angle (≈1 exactly at a cusp).
    """
    dirs = fibonacci_directions(n_dirs)
    d, T_end, _ = depth_batch(scene, np.broadcast_to(p, dirs.shape), dirs, t_n, t_f, n_quad)
    absorbing = T_end < 0.01
    if not absorbing.any():
        return None
    da = np.where(absorbing, d, np.inf)
    i0 = int(da.argmin())
    spread = float(d[absorbing].max() / da[i0])
    far = ((dirs @ dirs[i0]) < math.cos(min_angle)) & absorbing
    gap = float(da[far].min() / da[i0]) if far.any() else math.inf
    return {"v0": dirs[i0], "spread": spread, "gap": gap, "best": float(da[i0])}


@dataclass
class IdentityReport:
    lhs: float = math.nan
    rhs: float = math.nan
    abs_err: float = math.nan
    sigma_true: float = math.nan
    sigma_recovered: float = math.nan
    D: float = math.nan
    skipped: bool = False
    reason: str = ""


def probe_point(scene, p, t_n=0.005, t_f=None, delta=0.015, n_dirs=256, n_quad=512,
                refine_quad=4096, cusp_ratio=1.03, cusp_angle_deg=20.0) -> IdentityReport:
    """Brute-force conversion check at one point.

    Recovers sigma from the searched distance and its central-difference
    gradient, and evaluates the directional-derivative identity
    lhs = dD/dt along the argmin direction, rhs = -1 + (D - t_n) * sigma(p + t_n v).
    Points near cusps (a second depth basin within cusp_ratio of the best, or
    unstable argmin direction across the stencil) are skipped with a reason.
    """
    p = np.asarray(p, dtype=np.float64)
    if t_f is None:
        t_f = float(np.linalg.norm(p) + 2.5 * scene.extent())
    sweep = _direction_sweep(scene, p, t_n, t_f, n_dirs, n_quad)
    if sweep is None:
        return IdentityReport(skipped=True, reason="no absorbing direction")
    direction_sensitive = sweep["spread"] > 1.6
    if direction_sensitive and sweep["gap"] < cusp_ratio:
        return IdentityReport(skipped=True, reason="cusp: second depth basin too close")

    # refine the argmin direction at p first; the stencil, the lhs displacement
    # and the rhs density sample all use that one direction
    span = 1.4 * math.sqrt(4.0 * math.pi / n_dirs)
    _, vstar, _ = _refine_directions(
        scene, p[None], sweep["v0"][None], t_n, t_f, refine_quad, span
    )
    v0 = vstar[0]
    eye = np.eye(3)
    stencil = np.concatenate(
        [p[None], p + delta * eye, p - delta * eye, (p + delta * v0)[None], (p - delta * v0)[None]]
    )
    D, vref, T_end = _refine_directions(
        scene, stencil, np.broadcast_to(v0, stencil.shape), t_n, t_f, refine_quad, span * 0.7
    )
    if (T_end >= 0.01).any():
        return IdentityReport(skipped=True, reason="truncated ray in stencil")
    angles = np.degrees(np.arccos(np.clip(vref @ vref[0], -1.0, 1.0)))
    if direction_sensitive and angles.max() > cusp_angle_deg:
        return IdentityReport(skipped=True, reason="cusp: argmin direction unstable")

    grad = (D[1:4] - D[4:7]) / (2.0 * delta)
    lhs = (D[7] - D[8]) / (2.0 * delta)
    sigma_true = float(scene.density(p[None])[0])
    rhs = -1.0 + (D[0] - t_n) * float(scene.density((p + t_n * v0)[None])[0])
    sigma_rec = max(0.0, 1.0 - float(np.linalg.norm(grad))) / D[0]
    return IdentityReport(
        lhs=float(lhs),
        rhs=float(rhs),
        abs_err=float(abs(lhs - rhs)),
        sigma_true=sigma_true,
        sigma_recovered=float(sigma_rec),
        D=float(D[0]),
    )


def verify_identity(scene, p, v=None, **kw) -> IdentityReport:
    """Spec-level single-point identity check (v defaults to the argmin direction)."""
    return probe_point(scene, p, **kw)


# -- dataset synthesis -----------------------------------------------------------


def render_oracle_image(scene, cam: Camera, t_n=0.01, n=256, chunk=4096) -> np.ndarray:
    """Direct quadrature of the rendering integral with analytic density/color.

    Returns an (H, W, 4) float image in [0, 1]; alpha = 1 - T(t_f).
    """
    pixels = cam.all_pixels()
    o, d = cam.rays_for_pixels(pixels)
    dist = np.linalg.norm(cam.pose.translation)
    ext = scene.extent()
    t0, t1 = max(t_n, dist - 1.4 * ext), dist + 1.4 * ext
    t = np.linspace(t0, t1, n)
    dt = t[1] - t[0]
    img = np.zeros((pixels.shape[0], 4))
    for s in range(0, pixels.shape[0], chunk):
        oo, dd = o[s : s + chunk], d[s : s + chunk]
        pts = oo[:, None, :] + t[None, :, None] * dd[:, None, :]
        flat = pts.reshape(-1, 3)
        sig = scene.density(flat).reshape(oo.shape[0], n)
        col = scene.color(flat).reshape(oo.shape[0], n, 3)
        tau = np.concatenate(
            [np.zeros((sig.shape[0], 1)), np.cumsum(0.5 * (sig[:, 1:] + sig[:, :-1]) * dt, 1)], 1
        )
        T = np.exp(-tau)
        w = T[:, :-1] - T[:, 1:]
        cmid = 0.5 * (col[:, :-1] + col[:, 1:])
        img[s : s + chunk, :3] = (w[..., None] * cmid).sum(1)
        img[s : s + chunk, 3] = 1.0 - T[:, -1]
    return np.clip(img.reshape(cam.height, cam.width, 4), 0.0, 1.0)


def hemisphere_cameras(n, radius, angle_x, resolution, z_min=0.25, seed=0):
    """Deterministic golden-spiral viewpoints on the upper hemisphere, looking at origin."""
    rng = np.random.default_rng(seed)
    cams = []
    for i in range(n):
        z = z_min + (0.92 - z_min) * ((i + 0.5) / n)
        phi = math.pi * (1 + math.sqrt(5.0)) * (i + rng.uniform(0.0, 0.25))
        r = math.sqrt(1 - z * z)
        eye = radius * np.array([r * math.cos(phi), r * math.sin(phi), z])
        cams.append(Camera.from_angle_x(angle_x, resolution[0], resolution[1], look_at_pose(eye)))
    return cams


def synthesize_dataset(
    scene,
    out_dir,
    n_views=20,
    resolution=(64, 64),
    splits=(("train", 1.0), ("val", 0.25), ("test", 0.25)),
    radius=2.3,
    angle_x=0.6911112,
    n_quad=256,
    seed=0,
):
    """Render and write a transforms-style dataset from hemisphere viewpoints.

    Per split: transforms_<split>.json with camera_angle_x and frames
    [{file_path, transform_matrix}], plus RGBA PNGs. Images come from direct
    quadrature of the analytic scene; alpha records 1 - transmittance.
    """
    if n_views < 1:
        raise ValueError("need at least one view")
    out = Path(out_dir)
    for si, (split, frac) in enumerate(splits):
        count = max(1, int(round(n_views * frac)))
        cams = hemisphere_cameras(count, radius, angle_x, resolution, seed=seed + 101 * si)
        frames = []
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, cam in enumerate(cams):
            img = render_oracle_image(scene, cam, n=n_quad)
            name = f"{split}/r_{i:03d}.png"
            arr = (np.round(img * 255.0)).astype(np.uint8)
            Image.fromarray(arr, mode="RGBA").save(out / name)
            frames.append(
                {"file_path": name, "transform_matrix": cam.pose.matrix().tolist()}
            )
        payload = {"camera_angle_x": angle_x, "frames": frames}
        with open(out / f"transforms_{split}.json", "w") as f:
            json.dump(payload, f, indent=1)
    return out


# -- scene registry ----------------------------------------------------------------


def make_scene(name: str) -> AnalyticScene:
    """Shipped analytic scenes used by the CLI, experiments, and acceptance checks."""
    if name == "desk":
        return AnalyticScene(
            [
                Sphere((0.0, 0.0, 0.02), 0.40, 14.0, (0.85, 0.28, 0.22)),
                Sphere((0.42, 0.20, -0.10), 0.17, 14.0, (0.20, 0.45, 0.90)),
                Sphere((-0.30, 0.42, -0.05), 0.13, 14.0, (0.90, 0.80, 0.25)),
            ]
        )
    if name == "smoke":
        return AnalyticScene(
            [
                GaussianBlob((0.0, 0.0, 0.0), 0.35, 9.0, (0.92, 0.92, 0.95)),
                GaussianBlob((0.32, -0.18, 0.12), 0.20, 7.0, (0.95, 0.60, 0.30)),
            ]
        )
    if name == "twosphere":
        return AnalyticScene(
            [
                Sphere((-0.4, 0.0, 0.0), 0.22, 14.0, (0.85, 0.30, 0.25)),
                Sphere((0.4, 0.0, 0.0), 0.22, 14.0, (0.25, 0.40, 0.88)),
            ]
        )
    if name == "hard_sphere":
        return AnalyticScene([Sphere((0.0, 0.0, 0.0), 0.5, 1e4)])
    if name == "uniform_blob":
        return AnalyticScene([Sphere((0.0, 0.0, 0.0), 1.1, 6.0)])
    if name == "gauss_smoke":
        return AnalyticScene([GaussianBlob((0.0, 0.0, 0.0), 0.8, 6.0)])
    if name == "vacuum":
        return AnalyticScene([])
    raise KeyError(f"unknown scene {name!r}")
