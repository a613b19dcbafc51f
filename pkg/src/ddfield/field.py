"""Distance-density field network.

A coordinate MLP over a 4D input (x, y, z, w), always evaluated on the w = 0
slice. It outputs a strictly positive distance D, the 4-axis gradient of D
via forward jets (the w component is the auxiliary gradient that absorbs the
missing slope near cusps), a view-conditioned color, and the density obtained
from (D, ||∇D||) by the explicit conversion formula.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, asdict

import numpy as np
import torch

from .jets import Jet2, ParamTape

E_W = (0.0, 0.0, 0.0, 1.0)


class FieldEvalError(RuntimeError):
    pass


@dataclass
class FieldConfig:
    width: int = 64
    depth: int = 6
    pe_bands: int = 6          # L for the damped encoding of the 4D input
    t_n: float = 0.05          # lower distance bound; caps density at 1/t_n
    scene_bound: float = 1.0   # half-extent of the axis-aligned domain cube
    alpha: float = 1.0         # auxiliary-gradient shape parameter
    use_view_dir: bool = True
    dir_bands: int = 4         # standard encoding bands for the view direction
    color_width: int = 0       # 0 -> same as width
    eps_d: float = 1e-4
    eps_g: float = 1e-6
    dtype: str = "float32"

    def __post_init__(self):
        if self.t_n <= 0:
            raise ValueError("t_n must be positive")
        if self.pe_bands < 1:
            raise ValueError("pe_bands must be >= 1")
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")
        if not self.color_width:
            self.color_width = self.width

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self):
        return asdict(self)


@dataclass
class FieldOutput:
    """Per-point field outputs. D > 0; sigma in [0, 1/t_n]."""

    D: torch.Tensor          # (B,)
    gradD: torch.Tensor      # (B, 4)
    color: torch.Tensor      # (B, 3)
    sigma: torch.Tensor      # (B,)


@dataclass
class FieldSamples:
    """FieldOutput plus the derivative extras the losses consume."""

    D: torch.Tensor
    gradD: torch.Tensor
    color: torch.Tensor
    sigma: torch.Tensor
    mixed_tw: torch.Tensor | None = None   # d²D/dt dw per point, t = ray direction
    color_jac: torch.Tensor | None = None  # (B, 3, 3) spatial color Jacobian


# -- encoders and activation ---------------------------------------------------


def encode_damped(p, bands: int):
    """Damped sinusoidal bands [sin(2^k p)/2^k, cos(2^k p)/2^k], k = 0..bands-1.

    Every band's derivative amplitude is exactly 1, so all frequencies enter
    the gradient on an equal footing. Works on tensors and on jets.
    """
    parts = []
    for k in range(bands):
        s = float(2**k)
        if isinstance(p, Jet2):
            q = p * s
            parts.append(q.sin() * (1.0 / s))
            parts.append(q.cos() * (1.0 / s))
        else:
            parts.append(torch.sin(p * s) / s)
            parts.append(torch.cos(p * s) / s)
    return Jet2.cat(parts) if isinstance(p, Jet2) else torch.cat(parts, dim=-1)


def encode_standard(p, bands: int):
    """Classic sinusoidal bands [sin(2^k p), cos(2^k p)] (color branch, view dir)."""
    parts = []
    for k in range(bands):
        s = float(2**k)
        if isinstance(p, Jet2):
            q = p * s
            parts.append(q.sin())
            parts.append(q.cos())
        else:
            parts.append(torch.sin(p * s))
            parts.append(torch.cos(p * s))
    return Jet2.cat(parts) if isinstance(p, Jet2) else torch.cat(parts, dim=-1)


def smooth_activation(x):
    """x * tanh(exp(x)): C² everywhere, approaches identity for large x."""
    if isinstance(x, Jet2):
        return x.tanh_exp()
    return x * torch.tanh(torch.exp(x))


# -- conversion ----------------------------------------------------------------


def density_from_distance(D: torch.Tensor, gradD: torch.Tensor, t_n: float, eps_d: float = 1e-4):
    """sigma = max(0, 1 - ||gradD||) / max(D, eps_d), capped at 1/t_n.

    The norm runs over all four gradient components so the auxiliary w slope
    can cancel spurious density near cusps. Slopes above 1 clamp to zero
    density; the cap reflects that t_n bounds the representable density.
    """
    if torch.any(D <= 0):
        raise FieldEvalError("density conversion requires D > 0 (positivity head violated)")
    g = torch.sqrt((gradD * gradD).sum(-1) + 1e-20)
    sigma = torch.clamp(1.0 - g, min=0.0) / torch.clamp(D, min=eps_d)
    return torch.clamp(sigma, max=1.0 / t_n)


def nearest_view_direction(gradD: torch.Tensor, eps_g: float = 1e-6):
    """Direction toward the nearest content: -gradD_xyz normalized.

    Returns (dirs, valid). Points with a near-zero spatial gradient are
    interior/ambiguous; valid is False there and callers must skip them.
    """
    g = gradD[..., :3]
    n = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    valid = n.squeeze(-1) > eps_g
    dirs = -g / torch.clamp(n, min=eps_g)
    return dirs, valid


# -- the network ---------------------------------------------------------------


class Field:
    """Coordinate MLP producing (D, ∇D, color, sigma) on the w = 0 slice."""

    def __init__(self, config: FieldConfig, seed: int = 0):
        self.config = config
        self.tape = ParamTape(dtype=config.torch_dtype)
        rng = np.random.default_rng(seed)
        c = config

        self.in_dim = 4 + 8 * c.pe_bands           # raw coords + damped bands
        self.skip_at = c.depth // 2
        dims = []
        d = self.in_dim
        for i in range(c.depth):
            if i == self.skip_at and i > 0:
                d += self.in_dim
            dims.append((d, c.width))
            d = c.width
        self._trunk = [
            (self._init_linear(rng, f"trunk{i}", din, dout)) for i, (din, dout) in enumerate(dims)
        ]

        # distance head: small weights + bias chosen so initial D ~ 0.3 * bound
        w = rng.uniform(-1, 1, size=(c.width, 1)) * (0.1 / math.sqrt(c.width))
        b0 = math.log(math.expm1(max(0.3 * c.scene_bound - c.eps_d, 1e-3)))
        self.dist_w = self.tape.parameter("dist.w", w)
        self.dist_b = self.tape.parameter("dist.b", np.array([b0]))

        color_in = c.width + 6 * c.pe_bands        # trunk feature + standard bands of xyz
        if c.use_view_dir:
            color_in += 3 + 6 * c.dir_bands
        self._color = [
            self._init_linear(rng, "color0", color_in, c.color_width),
            self._init_linear(rng, "color1", c.color_width, 3),
        ]

    def _init_linear(self, rng, name, din, dout):
        bound = 1.0 / math.sqrt(din)
        w = self.tape.parameter(f"{name}.w", rng.uniform(-bound, bound, size=(din, dout)))
        b = self.tape.parameter(f"{name}.b", rng.uniform(-bound, bound, size=dout))
        return w, b

    @property
    def dtype(self):
        return self.config.torch_dtype

    # -- evaluation -------------------------------------------------------

    def _lift(self, p3: torch.Tensor, ray_dirs: torch.Tensor | None):
        c = self.config
        p3 = torch.clamp(p3.to(self.dtype), -c.scene_bound, c.scene_bound)
        p4 = torch.cat([p3, torch.zeros_like(p3[..., :1])], dim=-1)
        pairs = ()
        if ray_dirs is not None:
            v4 = torch.cat([ray_dirs.to(self.dtype), torch.zeros_like(ray_dirs[..., :1])], dim=-1)
            e_w = torch.tensor(E_W, dtype=self.dtype)
            pairs = ((v4, e_w),)
        return Jet2.seed(p4, pairs)

    def _trunk_features(self, jet: Jet2) -> Jet2:
        enc = Jet2.cat([jet, encode_damped(jet, self.config.pe_bands)])
        h = enc
        for i, (w, b) in enumerate(self._trunk):
            if i == self.skip_at and i > 0:
                h = Jet2.cat([h, enc])
            h = h.affine(w, b).tanh_exp()
        return h

    def query(
        self,
        p3: torch.Tensor,
        view_dirs: torch.Tensor | None = None,
        ray_dirs: torch.Tensor | None = None,
        need_color_jac: bool = False,
    ) -> FieldSamples:
        """Evaluate the field at (B, 3) points.

        ray_dirs requests the mixed derivative d²D/dt dw along those unit
        directions; view_dirs conditions the color head (zero spatial jet, so
        the color Jacobian stays a fixed-view derivative).
        """
        c = self.config
        jet = self._lift(p3, ray_dirs)
        h = self._trunk_features(jet)

        d_raw = h.affine(self.dist_w, self.dist_b)
        d_jet = d_raw.softplus() + c.eps_d
        D = d_jet.value.squeeze(-1)
        gradD = d_jet.grad.squeeze(-1)
        mixed_tw = d_jet.mixed[0].squeeze(-1) if d_jet.mixed else None

        color_parts = [h, encode_standard(jet.select(slice(0, 3)), c.pe_bands)]
        if c.use_view_dir:
            if view_dirs is None:
                view_dirs = torch.zeros_like(p3)
            vjet = Jet2.const(view_dirs.to(self.dtype), h)
            color_parts += [vjet, encode_standard(vjet, c.dir_bands)]
        ch = Jet2.cat(color_parts)
        ch = ch.affine(*self._color[0]).tanh_exp()
        c_jet = ch.affine(*self._color[1]).sigmoid()
        color = c_jet.value
        color_jac = c_jet.grad[..., :3, :].transpose(-1, -2) if need_color_jac else None

        if not (torch.isfinite(D).all() and torch.isfinite(color).all()):
            raise FieldEvalError(f"non-finite output from {self._locate_nonfinite(jet)}")
        sigma = density_from_distance(D, gradD, c.t_n, c.eps_d)
        return FieldSamples(D, gradD, color, sigma, mixed_tw, color_jac)

    def forward(self, p3, view_dirs=None) -> FieldOutput:
        """Spec-level forward: distance, 4-gradient, color, converted density."""
        s = self.query(torch.as_tensor(p3, dtype=self.dtype), view_dirs)
        return FieldOutput(s.D, s.gradD, s.color, s.sigma)

    __call__ = forward

    def _locate_nonfinite(self, jet: Jet2) -> str:
        """Re-run the trunk with per-layer checks to name the first bad layer."""
        with torch.no_grad():
            probe = Jet2(jet.value.detach(), jet.grad.detach(), (), ())
            enc = Jet2.cat([probe, encode_damped(probe, self.config.pe_bands)])
            h = enc
            for i, (w, b) in enumerate(self._trunk):
                if i == self.skip_at and i > 0:
                    h = Jet2.cat([h, enc])
                h = h.affine(w, b).tanh_exp()
                if not torch.isfinite(h.value).all():
                    return f"trunk layer {i}"
            d = h.affine(self.dist_w, self.dist_b)
            if not torch.isfinite(d.value).all():
                return "distance head"
        return "color head"
