"""Dataset ingestion, the training loop, and checkpoint persistence.

The objective per iteration over a random ray batch is
photometric + alpha supervision + lambda_const * auxiliary-shape penalty
+ lambda_blank * blank-region color penalty (the blank term switches on after
a warmup, once the distance field has roughly formed). A single trainer owns
the parameters; given a seed, runs are deterministic.
"""

from __future__ import annotations

import base64
import json
import math
import struct
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .cameras import Camera, PoseSE3
from .field import Field, FieldConfig
from .render import (RayBatch, composite, loss_blank, loss_const, loss_photometric,
                     psnr, ray_cube_span, render_image)

CKPT_MAGIC = b"NDDF"
CKPT_VERSION = 1


class DatasetError(ValueError):
    pass


class TrainAborted(RuntimeError):
    def __init__(self, msg, checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class Frame:
    image: np.ndarray   # (H, W, 4) float in [0, 1]; RGB premultiplied by alpha
    camera: Camera
    path: str


@dataclass
class Dataset:
    frames: list
    camera_angle_x: float
    split: str

    def __len__(self):
        return len(self.frames)


def load_dataset(root, split="train") -> Dataset:
    """Read transforms_<split>.json + images; poses are camera-to-world, -z forward."""
    root = Path(root)
    tf = root / f"transforms_{split}.json"
    if not tf.exists():
        raise DatasetError(f"missing transforms file {tf}")
    meta = json.loads(tf.read_text())
    angle = float(meta["camera_angle_x"])
    frames = []
    res = None
    for i, fr in enumerate(meta["frames"]):
        fid = fr.get("file_path", f"frame {i}")
        m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4):
            raise DatasetError(f"{fid}: transform_matrix must be 4x4")
        R = m[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-3 or np.linalg.det(R) < 0:
            raise DatasetError(f"{fid}: rotation block is not orthonormal")
        path = root / fr["file_path"]
        if not path.exists() and path.suffix == "":
            path = path.with_suffix(".png")
        if not path.exists():
            raise DatasetError(f"{fid}: image not found at {path}")
        img = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
        if res is None:
            res = img.shape[:2]
        elif img.shape[:2] != res:
            raise DatasetError(f"{fid}: resolution {img.shape[:2]} != {res}")
        # re-orthonormalize within tolerance so PoseSE3's strict check passes
        u, _, vt = np.linalg.svd(R)
        cam = Camera.from_angle_x(angle, img.shape[1], img.shape[0], PoseSE3(u @ vt, m[:3, 3]))
        frames.append(Frame(img, cam, str(path)))
    return Dataset(frames, angle, split)


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_rays: int = 512
    n_samples: int = 64
    learn_rate: float = 5e-4
    lr_final: float = 5e-5
    lambda_const: float = 0.01
    lambda_blank: float = 0.001
    blank_start: int = 1000
    alpha_weight: float = 0.1
    seed: int = 0
    val_every: int = 500
    val_frames: int = 2
    val_samples: int = 48
    compile: bool = False

    def __post_init__(self):
        if min(self.iterations, self.batch_rays, self.n_samples) < 0:
            raise ValueError("sizes must be non-negative")
        if self.learn_rate <= 0 or self.lr_final <= 0 or self.lr_final >= self.learn_rate:
            raise ValueError("decay endpoint must be below the starting rate")

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    format_version: int
    field_config: FieldConfig
    params: np.ndarray          # float32 flat
    manifest: list
    iteration: int
    rng_state: bytes
    extra: dict = dc_field(default_factory=dict)

    def build_field(self) -> Field:
        f = Field(self.field_config)
        f.tape.load_flat(self.params)
        return f


def save_checkpoint(ckpt: Checkpoint, path):
    """Binary layout: magic, version u32, length-prefixed JSON header, raw f32 array."""
    header = {
        "format_version": ckpt.format_version,
        "field_config": ckpt.field_config.to_dict(),
        "manifest": [[n, list(s)] for n, s in ckpt.manifest],
        "iteration": ckpt.iteration,
        "rng_state": base64.b64encode(ckpt.rng_state).decode("ascii"),
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    arr = np.ascontiguousarray(ckpt.params, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"corrupt checkpoint header: {e}") from e
    params = np.frombuffer(raw[12 + hlen :], dtype="<f4").copy()
    manifest = [(n, tuple(s)) for n, s in header["manifest"]]
    expect = sum(int(np.prod(s)) for _, s in manifest)
    if params.size != expect:
        raise ValueError(f"parameter array length {params.size} != manifest total {expect}")
    return Checkpoint(
        format_version=header["format_version"],
        field_config=FieldConfig(**header["field_config"]),
        params=params,
        manifest=manifest,
        iteration=header["iteration"],
        rng_state=base64.b64decode(header["rng_state"]),
        extra=header.get("extra", {}),
    )


def _ray_pool(dataset: Dataset, t_n: float, bound: float, dtype):
    """All training rays that intersect the domain cube, with per-ray spans.

    Rays missing the cube see only empty background and cannot constrain the
    field, so they are left out of the pool.
    """
    origins, dirs, rgb, alpha = [], [], [], []
    for fr in dataset.frames:
        cam = fr.camera
        px = cam.all_pixels()
        o, d = cam.rays_for_pixels(px)
        img = fr.image.reshape(-1, 4)
        origins.append(o)
        dirs.append(d)
        rgb.append(img[:, :3])
        alpha.append(img[:, 3])
    cat = lambda xs: torch.as_tensor(np.concatenate(xs), dtype=dtype)
    origins, dirs, rgb, alpha = cat(origins), cat(dirs), cat(rgb), cat(alpha)
    near, far, hit = ray_cube_span(origins, dirs, bound, t_n)
    return origins[hit], dirs[hit], rgb[hit], alpha[hit], near[hit], far[hit]


def make_checkpoint(field: Field, iteration: int, gen: torch.Generator, extra=None) -> Checkpoint:
    return Checkpoint(
        format_version=CKPT_VERSION,
        field_config=field.config,
        params=field.tape.flat().astype(np.float32),
        manifest=field.tape.manifest(),
        iteration=iteration,
        rng_state=bytes(gen.get_state().numpy().tobytes()),
        extra=extra or {},
    )


def train(field: Field, dataset: Dataset, cfg: TrainConfig, val_dataset: Dataset | None = None,
          out_dir=None, log=print):
    """Optimize the field on the dataset. Returns (Checkpoint, metrics list).

    Deterministic given cfg.seed. On a non-finite loss the run aborts,
    raising TrainAborted carrying the last good checkpoint.
    """
    c = field.config
    dtype = field.dtype
    gen = torch.Generator().manual_seed(cfg.seed)
    origins, dirs, rgb, alpha, near, far = _ray_pool(dataset, c.t_n, c.scene_bound, dtype)
    n_pool = origins.shape[0]
    params = field.tape.tensors()
    optim = torch.optim.Adam(params, lr=cfg.learn_rate, betas=(0.9, 0.999), eps=1e-8)
    decay = (cfg.lr_final / cfg.learn_rate) ** (1.0 / max(1, cfg.iterations))
    need_mixed = cfg.lambda_const > 0

    def step_loss(o, d, nr, fr_, u, rgb_gt, alpha_gt, lam_blank):
        t = nr[:, None] + (torch.arange(cfg.n_samples, dtype=dtype) + u) / cfg.n_samples * (fr_ - nr)[:, None]
        B, n = t.shape
        pts = o[:, None, :] + t[..., None] * d[:, None, :]
        vdirs = d[:, None, :].expand(B, n, 3).reshape(-1, 3)
        s = field.query(
            pts.reshape(-1, 3),
            view_dirs=vdirs if c.use_view_dir else None,
            ray_dirs=vdirs if need_mixed else None,
            need_color_jac=True,
        )
        rays = RayBatch(o, d, nr, fr_, None)
        render = composite(s.sigma.view(B, n), s.color.view(B, n, 3), t, rays, validate=False)
        l_photo = loss_photometric(render.color, rgb_gt)
        l_alpha = ((1.0 - render.trans_residual - alpha_gt) ** 2).mean()
        if need_mixed:
            dDdt = (s.gradD[:, :3] * vdirs).sum(-1)
            l_const = loss_const(s.D, dDdt, s.gradD[:, 3], s.mixed_tw, c.alpha, cfg.lambda_const)
        else:
            l_const = torch.zeros((), dtype=dtype)
        l_blank = lam_blank * loss_blank(s.color_jac, s.gradD, s.sigma, c.t_n)
        total = l_photo + cfg.alpha_weight * l_alpha + l_const + l_blank
        return total, l_photo.detach(), l_const.detach(), l_blank.detach()

    step_fn = torch.compile(step_loss) if cfg.compile else step_loss

    metrics = []
    window = []
    last_good = make_checkpoint(field, 0, gen, {"train_config": cfg.to_dict()})
    for it in range(cfg.iterations):
        idx = torch.randint(n_pool, (cfg.batch_rays,), generator=gen)
        u = torch.rand(cfg.batch_rays, cfg.n_samples, generator=gen, dtype=dtype)
        lam_blank = torch.tensor(
            cfg.lambda_blank if it >= cfg.blank_start else 0.0, dtype=dtype
        )
        total, l_photo, l_const, l_blank_v = step_fn(
            origins[idx], dirs[idx], near[idx], far[idx], u, rgb[idx], alpha[idx], lam_blank
        )
        if not torch.isfinite(total):
            ck = last_good
            if out_dir:
                save_checkpoint(ck, Path(out_dir) / "aborted.ckpt")
            raise TrainAborted(f"non-finite loss at iteration {it}", ck)
        optim.zero_grad()
        total.backward()
        optim.step()
        for grp in optim.param_groups:
            grp["lr"] *= decay
        window.append((float(l_photo), float(l_const), float(l_blank_v)))

        if (it + 1) % cfg.val_every == 0 or (it + 1) == cfg.iterations:
            w = np.array(window)
            window = []
            rec = {
                "iteration": it + 1,
                "loss_photo": float(w[:, 0].mean()),
                "loss_const": float(w[:, 1].mean()),
                "loss_blank": float(w[:, 2].mean()),
                "lr": float(optim.param_groups[0]["lr"]),
            }
            if val_dataset is not None and len(val_dataset):
                vals = []
                for frv in val_dataset.frames[: cfg.val_frames]:
                    img = render_image(field, frv.camera, n_samples=cfg.val_samples)
                    vals.append(psnr(img[..., :3], frv.image[..., :3]))
                rec["val_psnr"] = float(np.mean(vals))
            metrics.append(rec)
            if log:
                log(json.dumps(rec, sort_keys=True))
            last_good = make_checkpoint(field, it + 1, gen, {"train_config": cfg.to_dict()})

    ckpt = make_checkpoint(field, cfg.iterations, gen, {"train_config": cfg.to_dict()})
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out / "field.ckpt")
        with open(out / "metrics.jsonl", "w") as f:
            for rec in metrics:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return ckpt, metrics
