"""Camera localization against a trained field.

Per iteration: interest-region pixels are drawn from the observed image, the
chosen objective (photometric or pseudo-correspondence reprojection) is
evaluated under a body-frame SE(3) perturbation of the current pose, and Adam
updates the 6-vector tangent. Pseudo-correspondence surface points are
detached: they act as fixed 3D landmarks and the pose gradient flows through
the projection, as in classical reprojection objectives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
from scipy import ndimage

from .cameras import Camera, PoseSE3, project_torch, se3_exp
from .field import Field
from .render import RayBatch, loss_photometric, ray_cube_span, render_rays


class DivergedPose(RuntimeError):
    """All correspondence points fell behind the camera."""


@dataclass
class CorrespondenceBatch:
    """Per-ray pseudo-correspondences: pixel q, aggregated near-surface point."""

    pixels: torch.Tensor          # (B, 2) float (row, col)
    surface_points: torch.Tensor  # (B, 3), detached world points
    weight_mass: torch.Tensor     # (B,) fraction of samples that survived exclusion
    dropped: int = 0              # rays whose samples were all excluded


@dataclass
class LocalizeConfig:
    schedule: str = "hybrid"        # photo | reproj | hybrid
    iterations: int = 300           # total; hybrid splits 100 reproj + 200 photo
    n_rays: int = 256
    n_samples: int = 32
    lr: float = 0.01
    lr_decay: float = 0.8
    lr_decay_every: int = 50
    lambda_D: float = 1.0
    lambda_c: float = 10.0
    huber_px: float = 5.0
    seed: int = 0
    compile: bool = False

    def phases(self):
        if self.schedule == "photo":
            return [("photo", self.iterations)]
        if self.schedule == "reproj":
            return [("reproj", self.iterations)]
        if self.schedule == "hybrid":
            first = self.iterations // 3
            return [("reproj", first), ("photo", self.iterations - first)]
        raise ValueError(f"unknown schedule {self.schedule!r}")


def interest_region_sampling(image: np.ndarray, n_rays: int, rng, quantile=0.90, dilate=2):
    """Pixels concentrated on high-gradient regions of the observed image.

    Keypoints are pixels whose gradient magnitude exceeds the given quantile;
    each is dilated into a region and n_rays pixels are drawn uniformly from
    the union, without replacement (uniform over the image if the union is
    too small).
    """
    h, w = image.shape[:2]
    if n_rays > h * w:
        raise ValueError("more rays than pixels")
    lum = image[..., :3].mean(-1)
    if image.shape[-1] == 4:
        lum = lum + image[..., 3]
    gy, gx = np.gradient(lum)
    mag = np.hypot(gx, gy)
    pool = None
    if mag.max() > 1e-12:
        thresh = np.quantile(mag[mag > 0], quantile) if (mag > 0).any() else math.inf
        mask = ndimage.binary_dilation(mag >= thresh, iterations=dilate)
        if mask.sum() >= n_rays:
            pool = np.argwhere(mask)
    if pool is None:
        pool = np.argwhere(np.ones((h, w), dtype=bool))
    idx = rng.choice(pool.shape[0], size=n_rays, replace=False)
    return pool[idx]


def pseudo_correspondences(
    rays: RayBatch,
    observed: torch.Tensor,   # (B, 3) colors at the ray pixels
    rendered: torch.Tensor,   # (B, 3) current model colors
    D: torch.Tensor,          # (B, n)
    gradD: torch.Tensor,      # (B, n, 4)
    colors: torch.Tensor,     # (B, n, 3)
    t: torch.Tensor,          # (B, n)
    points: torch.Tensor,     # (B, n, 3)
    t_n: float,
    lambda_D: float = 1.0,
    lambda_c: float = 10.0,
) -> CorrespondenceBatch:
    """Softmax-weighted near-surface points per ray.

    score_ij = -lambda_D * D_ij ||gradD_ij x v_i|| / max(t_ij, t_n)
               -lambda_c  * ||C_i - c_ij||.
    Samples whose color is farther from the observation than the currently
    rendered color are excluded before the softmax; rays losing every sample
    are dropped and counted. The near-surface point uses the raw gradient:
    p - D * gradD_xyz.
    """
    with torch.no_grad():
        cdist = torch.linalg.vector_norm(observed[:, None, :] - colors, dim=-1)   # (B, n)
        rdist = torch.linalg.vector_norm(observed - rendered, dim=-1)             # (B,)
        include = cdist <= rdist[:, None] + 1e-12
        cross = torch.cross(gradD[..., :3], rays.dirs[:, None, :].expand_as(points), dim=-1)
        geom = D * torch.linalg.vector_norm(cross, dim=-1) / torch.clamp(t, min=t_n)
        score = -lambda_D * geom - lambda_c * cdist
        score = torch.where(include, score, torch.full_like(score, -torch.inf))
        g = torch.softmax(score, dim=-1)
        g = torch.nan_to_num(g, nan=0.0)
        surf = points - (D.unsqueeze(-1) * gradD[..., :3])
        surface_points = (g.unsqueeze(-1) * surf).sum(1)
        kept = include.any(-1)
        mass = include.float().mean(-1)
    return CorrespondenceBatch(
        pixels=rays.pixels[kept].to(observed.dtype),
        surface_points=surface_points[kept],
        weight_mass=mass[kept],
        dropped=int((~kept).sum()),
    )


def reprojection_loss(
    corr: CorrespondenceBatch,
    cam: Camera,
    w2c_rot: torch.Tensor,
    w2c_t: torch.Tensor,
    huber_px: float = 5.0,
):
    """Mean Huber-robustified pixel distance between each ray and its landmark.

    Landmarks behind the camera are dropped (counted); if every landmark is
    behind, the pose has diverged and the call is rejected.
    """
    proj, depth = project_torch(w2c_rot, w2c_t, cam, corr.surface_points)
    front = depth > 1e-6
    if not bool(front.any()):
        raise DivergedPose("all correspondence points behind the camera")
    res = torch.linalg.vector_norm(proj[front] - corr.pixels[front], dim=-1)
    hub = torch.where(
        res <= huber_px, 0.5 * res**2, huber_px * (res - 0.5 * huber_px)
    )
    info = {
        "mean_px": float(res.mean().detach()),
        "behind": int((~front).sum()),
        "dropped": corr.dropped,
    }
    return hub.mean(), info


def perturbed_pose(pose: PoseSE3, rot_deg: float, trans: float, rng) -> PoseSE3:
    """Body-frame rotation of exactly rot_deg about a random axis plus a world
    translation of norm exactly trans in a random direction."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    dR = PoseSE3.exp(np.concatenate([axis * math.radians(rot_deg), np.zeros(3)]))
    dt = rng.standard_normal(3)
    dt = dt / np.linalg.norm(dt) * trans
    return PoseSE3(pose.rotation @ dR.rotation, pose.translation + dt)


def sample_perturbation(rng, rot_deg_max: float, trans_max: float):
    """Rotation angle uniform in [0, max], axis uniform on the sphere,
    translation uniform in the ball of radius trans_max."""
    ang = rng.uniform(0.0, rot_deg_max)
    tr = trans_max * rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
    return ang, tr


def optimize_pose(
    field: Field,
    observed: np.ndarray,
    cam: Camera,
    init: PoseSE3,
    cfg: LocalizeConfig,
    gt_pose: PoseSE3 | None = None,
):
    """Estimate the camera pose of `observed` starting from `init`.

    Returns (pose, trace): per-iteration records of loss kind/value and, when
    the ground-truth pose is given, rotation/translation errors.
    """
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    dtype = field.dtype
    obs_t = torch.as_tensor(observed[..., :3].reshape(-1, 3), dtype=dtype)

    pose = PoseSE3(init.rotation.copy(), init.translation.copy())
    xi = torch.zeros(6, dtype=dtype, requires_grad=True)
    optim = torch.optim.Adam([xi], lr=cfg.lr)
    trace = []
    bound = field.config.scene_bound
    t_n = field.config.t_n

    def current_mats():
        """w2c and c2w under the tangent perturbation, differentiable in xi."""
        Rx, tx = se3_exp(xi)
        w2c = torch.as_tensor(pose.inverse().matrix()[:3], dtype=dtype)
        w2c_rot = Rx @ w2c[:, :3]
        w2c_t = Rx @ w2c[:, 3] + tx
        c2w_rot = w2c_rot.T
        c2w_t = -(c2w_rot @ w2c_t)
        return w2c_rot, w2c_t, c2w_rot, c2w_t

    def rays_from(c2w_rot, c2w_t, pixels):
        coords = torch.as_tensor(pixels, dtype=dtype) + 0.5
        d = torch.stack(
            [
                (coords[:, 1] - cam.cx) / cam.focal,
                -(coords[:, 0] - cam.cy) / cam.focal,
                -torch.ones(len(pixels), dtype=dtype),
            ],
            -1,
        )
        d = d / torch.linalg.vector_norm(d, dim=-1, keepdim=True)
        dirs = d @ c2w_rot.T
        origins = c2w_t.expand_as(dirs)
        # clip to the domain cube; spans are detached so sample positions are
        # treated as given when differentiating through the pose
        near, far, hit = ray_cube_span(origins.detach(), dirs.detach(), bound, t_n)
        span = (far - near).clamp(min=1e-3)
        far = torch.where(hit, far, near + span)
        return RayBatch(origins, dirs, near, far, torch.as_tensor(pixels, dtype=torch.long))

    it = 0
    for kind, n_iters in cfg.phases():
        for _ in range(n_iters):
            pixels = interest_region_sampling(observed, cfg.n_rays, rng)
            flat = pixels[:, 0] * cam.width + pixels[:, 1]
            target = obs_t[flat]

            def one_attempt():
                w2c_rot, w2c_t, c2w_rot, c2w_t = current_mats()
                rays = rays_from(c2w_rot, c2w_t, pixels)
                if kind == "photo":
                    render, _, _ = render_rays(field, rays, cfg.n_samples, jitter=True, generator=gen)
                    return loss_photometric(render.color, target), {}
                with torch.no_grad():
                    render, s, t = render_rays(field, rays, cfg.n_samples)
                    B, n = t.shape
                    pts = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
                    corr = pseudo_correspondences(
                        rays, target, render.color, s.D.view(B, n), s.gradD.view(B, n, 4),
                        s.color.view(B, n, 3), t, pts, t_n, cfg.lambda_D, cfg.lambda_c,
                    )
                return reprojection_loss(corr, cam, w2c_rot, w2c_t, cfg.huber_px)

            loss, info = one_attempt()
            if not torch.isfinite(loss):
                for g in optim.param_groups:
                    g["lr"] *= 0.5
                loss, info = one_attempt()
                if not torch.isfinite(loss):
                    trace.append({"iteration": it, "kind": kind, "loss": float("nan"), "aborted": True})
                    return pose, trace
            optim.zero_grad()
            loss.backward()
            optim.step()
            with torch.no_grad():
                step = xi.detach().numpy().astype(np.float64).copy()
                xi.zero_()
            pose = pose.update_body(step)

            rec = {"iteration": it, "kind": kind, "loss": float(loss.detach()), **info}
            if gt_pose is not None:
                rec["rot_err_deg"] = pose.rotation_error_deg(gt_pose)
                rec["trans_err"] = pose.translation_error(gt_pose)
            trace.append(rec)
            it += 1
            if it % cfg.lr_decay_every == 0:
                for g in optim.param_groups:
                    g["lr"] *= cfg.lr_decay
    return pose, trace


def write_trace(trace, path):
    """Line-delimited trace records: iteration, loss kind, loss, pose errors."""
    import json

    with open(path, "w") as f:
        for rec in trace:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
