"""Ray sampling, volume compositing, and the training losses.

Rays are independent work items over read-only field parameters; losses are
reduced with deterministic ordered sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .cameras import Camera
from .field import Field, FieldSamples


@dataclass
class RayBatch:
    """Batch of rays in scene units. dirs are unit vectors; t_near >= field t_n."""

    origins: torch.Tensor   # (B, 3)
    dirs: torch.Tensor      # (B, 3)
    t_near: torch.Tensor    # (B,)
    t_far: torch.Tensor     # (B,)
    pixels: torch.Tensor | None = None  # (B, 2) long, (row, col)

    def validate(self):
        n = torch.linalg.vector_norm(self.dirs, dim=-1)
        if not bool(((n - 1.0).abs() < 1e-5).all()):
            raise ValueError("ray directions must be unit vectors")
        if not bool((self.t_far > self.t_near).all()):
            raise ValueError("t_far must exceed t_near")
        return self

    def __len__(self):
        return self.origins.shape[0]


def ray_cube_span(origins, dirs, bound: float, t_n: float):
    """Parameter interval where each ray lies inside the domain cube.

    Returns (t0, t1, hit): rays with hit=False miss the cube entirely and see
    only empty background.
    """
    inv = 1.0 / torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    a = (-bound - origins) * inv
    b = (bound - origins) * inv
    t0 = torch.minimum(a, b).amax(-1)
    t1 = torch.maximum(a, b).amin(-1)
    t0 = torch.clamp(t0, min=t_n)
    hit = t1 > t0 + 1e-6
    return t0, t1, hit


@dataclass
class RenderOutput:
    color: torch.Tensor            # (B, 3)
    depth: torch.Tensor            # (B,)
    trans_residual: torch.Tensor   # (B,) transmittance at t_far
    weights: torch.Tensor          # (B, n)


def rays_for_camera(cam: Camera, pixels, t_n: float, bound: float, dtype=torch.float32):
    """Rays through integer pixel centers, clipped to the domain cube.

    Returns (RayBatch of rays that hit the cube, hit mask over the input pixels).
    """
    o, d = cam.rays_for_pixels(np.asarray(pixels))
    ot = torch.as_tensor(o, dtype=dtype)
    dt_ = torch.as_tensor(d, dtype=dtype)
    t0, t1, hit = ray_cube_span(ot, dt_, bound, t_n)
    batch = RayBatch(
        ot[hit],
        dt_[hit],
        t0[hit],
        t1[hit],
        torch.as_tensor(np.asarray(pixels), dtype=torch.long)[hit],
    ).validate()
    return batch, hit


def stratified_samples(rays: RayBatch, n: int, jitter: bool, generator=None) -> torch.Tensor:
    """One t per equal bin of [t_near, t_far]: uniform draw if jitter else midpoint."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    B = len(rays)
    dtype = rays.origins.dtype
    if jitter:
        u = torch.rand(B, n, generator=generator, dtype=dtype)
    else:
        u = torch.full((B, n), 0.5, dtype=dtype)
    edges = torch.arange(n, dtype=dtype)
    frac = (edges.unsqueeze(0) + u) / n
    return rays.t_near[:, None] + frac * (rays.t_far - rays.t_near)[:, None]


def composite(sigma: torch.Tensor, colors: torch.Tensor, t: torch.Tensor, rays: RayBatch,
              validate: bool = True) -> RenderOutput:
    """Discrete volume rendering quadrature.

    alpha_i = 1 - exp(-sigma_i * delta_i) with delta the gap to the next
    sample (the last gap runs to t_far); weights w_i = T_i * alpha_i with
    T the exclusive product of (1 - alpha). color = sum w_i c_i,
    depth = t_near + sum w_i t_i, and sum w_i + T(t_far) = 1.
    """
    if validate and not bool((t[:, 1:] > t[:, :-1]).all()):
        raise ValueError("sample positions must be strictly increasing")
    delta = torch.cat([t[:, 1:] - t[:, :-1], (rays.t_far[:, None] - t[:, -1:])], dim=1)
    alpha = 1.0 - torch.exp(-sigma * delta)
    one_m = 1.0 - alpha
    T = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), one_m], dim=1), dim=1)
    weights = T[:, :-1] * alpha
    color = (weights.unsqueeze(-1) * colors).sum(1)
    depth = rays.t_near + (weights * t).sum(1)
    return RenderOutput(color, depth, T[:, -1], weights)


def render_rays(
    field: Field,
    rays: RayBatch,
    n_samples: int,
    jitter: bool = False,
    generator=None,
    need_mixed: bool = False,
    need_color_jac: bool = False,
) -> tuple[RenderOutput, FieldSamples, torch.Tensor]:
    """Sample, query the field, and composite. Returns (render, flat samples, t)."""
    t = stratified_samples(rays, n_samples, jitter, generator)
    B, n = t.shape
    pts = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    dirs = rays.dirs[:, None, :].expand(B, n, 3).reshape(-1, 3)
    s = field.query(
        pts.reshape(-1, 3),
        view_dirs=dirs if field.config.use_view_dir else None,
        ray_dirs=dirs if need_mixed else None,
        need_color_jac=need_color_jac,
    )
    out = composite(s.sigma.view(B, n), s.color.view(B, n, 3), t, rays)
    return out, s, t


# -- losses --------------------------------------------------------------------


def loss_photometric(rendered: torch.Tensor, observed: torch.Tensor) -> torch.Tensor:
    """Mean over rays of the squared color residual (summed over channels)."""
    if rendered.shape[0] == 0:
        raise ValueError("empty ray batch")
    return ((rendered - observed) ** 2).sum(-1).mean()


def loss_const(
    D: torch.Tensor,
    dDdt: torch.Tensor,
    dDdw: torch.Tensor,
    mixed_tw: torch.Tensor,
    alpha: float,
    lam_const: float,
) -> torch.Tensor:
    """Shape penalty tying the mixed derivative to the auxiliary gradient.

    Active only where dD/dt > 0; weighted by the detached
    beta = D * (dD/dt)^2 * dD/dw, clamped to >= 0. Beta discriminates which
    points the constraint targets; a negative weight would turn the squared
    bracket into an unbounded descent direction (observed in training), so
    points on the negative-auxiliary side simply don't contribute.
    """
    beta = torch.relu(D * dDdt**2 * dDdw).detach()
    gate = (dDdt > 0).to(D.dtype).detach()
    bracket = mixed_tw - (alpha / D) * dDdw
    return lam_const * (gate * beta * bracket**2).mean()


def loss_blank(
    color_jac: torch.Tensor,
    gradD: torch.Tensor,
    sigma: torch.Tensor,
    t_n: float,
    blank_fraction: float = 0.1,
) -> torch.Tensor:
    """Color-change penalty along the distance gradient, for blank points only.

    contribution_i = || (dc/dp) . gradD_xyz ||_2 where sigma_i is below
    blank_fraction of the density cap 1/t_n; normalized by the batch size.
    """
    drift = torch.einsum("bij,bj->bi", color_jac, gradD[:, :3])
    mag = torch.sqrt((drift**2).sum(-1) + 1e-20)
    blank = (sigma < blank_fraction / t_n).to(mag.dtype).detach()
    return (mag * blank).sum() / mag.shape[0]


# -- images and slices -----------------------------------------------------------


def render_image(field: Field, cam: Camera, n_samples: int = 64, chunk: int = 2048) -> np.ndarray:
    """Per-pixel composite; returns (H, W, 4) float RGBA with alpha = 1 - T(t_far).

    Pixels whose ray misses the domain cube are fully transparent.
    """
    pixels = cam.all_pixels()
    out = np.zeros((pixels.shape[0], 4), dtype=np.float64)
    with torch.no_grad():
        for s in range(0, pixels.shape[0], chunk):
            rays, hit = rays_for_camera(
                cam, pixels[s : s + chunk], field.config.t_n, field.config.scene_bound,
                dtype=field.dtype,
            )
            if len(rays) == 0:
                continue
            render, _, _ = render_rays(field, rays, n_samples, jitter=False)
            block = np.zeros((hit.shape[0], 4))
            block[hit.numpy(), :3] = render.color.numpy()
            block[hit.numpy(), 3] = 1.0 - render.trans_residual.numpy()
            out[s : s + chunk] = block
    return out.reshape(cam.height, cam.width, 4)


_SLICE_AXES = {"x": 0, "y": 1, "z": 2}


def export_slice(field: Field, axis: str, value: float, field_kind: str, resolution: int = 128,
                 bound: float | None = None) -> dict:
    """Field values on an axis-aligned plane: distance, density, or auxgrad grid.

    Returns the numeric grid (row-major, first free axis down the rows) plus a
    min-max normalized uint8 image.
    """
    if axis not in _SLICE_AXES:
        raise ValueError(f"axis must be one of {sorted(_SLICE_AXES)}")
    if field_kind not in ("distance", "density", "auxgrad"):
        raise ValueError("field_kind must be distance, density, or auxgrad")
    b = bound if bound is not None else field.config.scene_bound
    if abs(value) > b:
        raise ValueError("slice position outside the domain")
    ax = _SLICE_AXES[axis]
    free = [a for a in range(3) if a != ax]
    u = np.linspace(-b, b, resolution)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    pts = np.zeros((resolution * resolution, 3))
    pts[:, free[0]] = uu.ravel()
    pts[:, free[1]] = vv.ravel()
    pts[:, ax] = value
    with torch.no_grad():
        s = field.query(torch.as_tensor(pts, dtype=field.dtype))
        grid = {
            "distance": s.D,
            "density": s.sigma,
            "auxgrad": s.gradD[:, 3],
        }[field_kind].numpy().reshape(resolution, resolution).astype(np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    img = np.zeros_like(grid) if hi - lo < 1e-12 else (grid - lo) / (hi - lo)
    return {
        "axis": axis,
        "value": value,
        "field_kind": field_kind,
        "resolution": resolution,
        "bound": b,
        "grid": grid,
        "image": np.round(img * 255.0).astype(np.uint8),
    }


def write_slice(sl: dict, path_prefix) -> tuple[Path, Path]:
    """Lossless text grid (header + row-major reals) and an 8-bit grayscale PNG."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    txt = prefix.with_suffix(".txt")
    with open(txt, "w") as f:
        f.write(
            f"# axis={sl['axis']} value={sl['value']!r} field={sl['field_kind']} "
            f"resolution={sl['resolution']} bound={sl['bound']!r}\n"
        )
        for row in sl["grid"]:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")
    png = prefix.with_suffix(".png")
    Image.fromarray(sl["image"], mode="L").save(png)
    return txt, png


def read_slice_grid(path) -> np.ndarray:
    with open(path) as f:
        header = f.readline()
        if not header.startswith("#"):
            raise ValueError("missing slice header")
        return np.array([[float(x) for x in line.split()] for line in f])


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else -10.0 * math.log10(mse)
