"""Forward-mode jets with reverse-mode parameter gradients.

A Jet2 carries a batch of feature vectors together with their first
derivatives along the four input axes (x, y, z, w) and, optionally, mixed
second directional derivatives for requested direction pairs. Jets are
propagated forward through a fixed set of primitives; every component is a
plain torch tensor, so reverse-mode differentiation of any scalar built from
jet components (w.r.t. network parameters, camera pose, ...) falls out of the
recorded autograd graph.

Jet evaluation is pure: concurrent evaluation over point batches is safe as
long as parameters are not mutated mid-pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "Jet2",
    "ParamTape",
    "UnsupportedPrimitive",
    "NonFiniteLoss",
    "eval_with_jets",
    "param_gradient",
    "stop_gradient",
    "gradient_check",
]

N_AXES = 4  # x, y, z, w


class UnsupportedPrimitive(TypeError):
    """Raised when a field function applies an operation the engine does not propagate."""


class NonFiniteLoss(ValueError):
    """Raised when a loss is non-finite before gradient accumulation starts."""


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype=like.dtype)
    return torch.as_tensor(x, dtype=like.dtype)


@dataclass
class Jet2:
    """Batched scalar features with spatial first and selected mixed second derivatives.

    value: (..., F)
    grad:  (..., 4, F)   d/dx, d/dy, d/dz, d/dw per feature
    mixed: tuple of (..., F), one entry per direction pair in `pairs`
    pairs: tuple of (a, b) direction tensors, each (4,) or (..., 4)
    """

    value: torch.Tensor
    grad: torch.Tensor
    mixed: tuple = ()
    pairs: tuple = ()

    # -- seeding ---------------------------------------------------------

    @staticmethod
    def seed(p: torch.Tensor, pairs=()) -> "Jet2":
        """Lift input coordinates (..., 4) to an identity jet."""
        if p.shape[-1] != N_AXES:
            raise ValueError(f"expected trailing dim {N_AXES}, got {p.shape}")
        eye = torch.eye(N_AXES, dtype=p.dtype).expand(*p.shape[:-1], N_AXES, N_AXES)
        mixed = tuple(torch.zeros_like(p) for _ in pairs)
        return Jet2(p, eye.clone(), mixed, tuple(pairs))

    @staticmethod
    def const(x, like: "Jet2") -> "Jet2":
        """A jet with zero spatial derivatives. The value may still carry autograd history."""
        v = _as_tensor(x, like.value)
        v = v.expand(like.value.shape[:-1] + v.shape[-1:]) if v.dim() < like.value.dim() else v
        g = torch.zeros(v.shape[:-1] + (N_AXES, v.shape[-1]), dtype=v.dtype)
        mixed = tuple(torch.zeros_like(v) for _ in like.pairs)
        return Jet2(v, g, mixed, like.pairs)

    # -- helpers ---------------------------------------------------------

    def _dir(self, a: torch.Tensor) -> torch.Tensor:
        """Directional first derivative: contraction of grad with direction a."""
        return torch.einsum("...k,...kf->...f", a.to(self.value.dtype), self.grad)

    def _unary(self, fv, d1, d2) -> "Jet2":
        g = d1.unsqueeze(-2) * self.grad
        mixed = []
        for (a, b), m in zip(self.pairs, self.mixed):
            mixed.append(d2 * self._dir(a) * self._dir(b) + d1 * m)
        return Jet2(fv, g, tuple(mixed), self.pairs)

    def _check_mate(self, other: "Jet2"):
        if len(self.pairs) != len(other.pairs):
            raise ValueError("jets carry different mixed-derivative pair sets")

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Jet2):
            self._check_mate(other)
            return Jet2(
                self.value + other.value,
                self.grad + other.grad,
                tuple(a + b for a, b in zip(self.mixed, other.mixed)),
                self.pairs,
            )
        c = _as_tensor(other, self.value)
        return Jet2(self.value + c, self.grad, self.mixed, self.pairs)

    __radd__ = __add__

    def __neg__(self):
        return Jet2(-self.value, -self.grad, tuple(-m for m in self.mixed), self.pairs)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Jet2) else -_as_tensor(other, self.value))

    def __rsub__(self, other):
        return (-self) + _as_tensor(other, self.value)

    def __mul__(self, other):
        if isinstance(other, Jet2):
            self._check_mate(other)
            u, v = self, other
            val = u.value * v.value
            g = u.grad * v.value.unsqueeze(-2) + v.grad * u.value.unsqueeze(-2)
            mixed = []
            for i, (a, b) in enumerate(self.pairs):
                mixed.append(
                    u.mixed[i] * v.value
                    + v.mixed[i] * u.value
                    + u._dir(a) * v._dir(b)
                    + u._dir(b) * v._dir(a)
                )
            return Jet2(val, g, tuple(mixed), self.pairs)
        c = _as_tensor(other, self.value)
        return Jet2(
            self.value * c,
            self.grad * (c.unsqueeze(-2) if c.dim() else c),
            tuple(m * c for m in self.mixed),
            self.pairs,
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet2):
            return self * other.reciprocal()
        return self * (1.0 / _as_tensor(other, self.value))

    def __rtruediv__(self, other):
        return self.reciprocal() * _as_tensor(other, self.value)

    # -- unary primitives --------------------------------------------------

    def reciprocal(self):
        v = self.value
        return self._unary(1.0 / v, -1.0 / v**2, 2.0 / v**3)

    def exp(self):
        e = torch.exp(self.value)
        return self._unary(e, e, e)

    def sin(self):
        s, c = torch.sin(self.value), torch.cos(self.value)
        return self._unary(s, c, -s)

    def cos(self):
        s, c = torch.sin(self.value), torch.cos(self.value)
        return self._unary(c, -s, -c)

    def tanh(self):
        t = torch.tanh(self.value)
        s2 = 1.0 - t * t
        return self._unary(t, s2, -2.0 * t * s2)

    def sigmoid(self):
        s = torch.sigmoid(self.value)
        d1 = s * (1.0 - s)
        return self._unary(s, d1, d1 * (1.0 - 2.0 * s))

    def softplus(self):
        s = torch.sigmoid(self.value)
        return self._unary(torch.nn.functional.softplus(self.value), s, s * (1.0 - s))

    def sqrt(self):
        r = torch.sqrt(self.value)
        return self._unary(r, 0.5 / r, -0.25 / (r * self.value))

    def square(self):
        return self._unary(self.value**2, 2.0 * self.value, torch.full_like(self.value, 2.0))

    def tanh_exp(self):
        """Fused x * tanh(exp(x)), the C2 activation used by the field network."""
        x = self.value
        e = torch.exp(x)
        t = torch.tanh(e)
        s2 = 1.0 - t * t
        fv = x * t
        d1 = t + x * s2 * e
        d2 = s2 * e * (2.0 + x - 2.0 * x * t * e)
        return self._unary(fv, d1, d2)

    # -- structural primitives ---------------------------------------------

    def affine(self, weight: torch.Tensor, bias=None) -> "Jet2":
        """Feature-space linear map: value @ weight (+ bias). weight: (F_in, F_out)."""
        val = self.value @ weight
        if bias is not None:
            val = val + bias
        g = self.grad @ weight
        mixed = tuple(m @ weight for m in self.mixed)
        return Jet2(val, g, mixed, self.pairs)

    def select(self, index) -> "Jet2":
        """Slice features (last dim). index: slice or int list."""
        return Jet2(
            self.value[..., index],
            self.grad[..., index],
            tuple(m[..., index] for m in self.mixed),
            self.pairs,
        )

    @staticmethod
    def cat(jets) -> "Jet2":
        jets = list(jets)
        pairs = jets[0].pairs
        for j in jets[1:]:
            jets[0]._check_mate(j)
        return Jet2(
            torch.cat([j.value for j in jets], dim=-1),
            torch.cat([j.grad for j in jets], dim=-1),
            tuple(
                torch.cat([j.mixed[i] for j in jets], dim=-1) for i in range(len(pairs))
            ),
            pairs,
        )

    def sum_features(self, keepdim=True) -> "Jet2":
        return Jet2(
            self.value.sum(-1, keepdim=keepdim),
            self.grad.sum(-1, keepdim=keepdim),
            tuple(m.sum(-1, keepdim=keepdim) for m in self.mixed),
            self.pairs,
        )

    def norm(self) -> "Jet2":
        """Euclidean norm over the feature dim; output has one feature."""
        return self.square().sum_features().sqrt()

    # -- guard against silent use of unsupported torch ops -------------------

    @classmethod
    def __torch_function__(cls, func, types, args=(), kwargs=None):
        name = getattr(func, "__name__", str(func))
        raise UnsupportedPrimitive(f"unsupported primitive for jet propagation: {name}")


def eval_with_jets(f, p, second_dirs=()) -> Jet2:
    """Evaluate field function ``f`` at points ``p`` with exact jets.

    p: (..., 4) tensor/array of input coordinates.
    second_dirs: iterable of (a, b) unit-direction pairs, each (4,) or (..., 4);
    one mixed second directional derivative aᵀ·H·b is propagated per pair.
    """
    pt = p if isinstance(p, torch.Tensor) else torch.as_tensor(p, dtype=torch.float64)
    pairs = tuple((_as_tensor(a, pt), _as_tensor(b, pt)) for a, b in second_dirs)
    return f(Jet2.seed(pt, pairs))


def stop_gradient(x):
    """Pass the value through; reverse-mode treats x as a constant."""
    if isinstance(x, Jet2):
        return Jet2(
            x.value.detach(),
            x.grad.detach(),
            tuple(m.detach() for m in x.mixed),
            tuple((a.detach(), b.detach()) for a, b in x.pairs),
        )
    return x.detach()


class ParamTape:
    """Named parameter store whose recorded computation yields reverse-mode gradients.

    Parameters are leaf tensors with requires_grad; any scalar computed from
    them carries the recorded operations (the autograd graph). The flat
    layout follows the registration order, so gradient accumulation and
    checkpoints are deterministic.
    """

    def __init__(self, dtype=torch.float32):
        self.dtype = dtype
        self._params: dict[str, torch.Tensor] = {}
        self._records: list = []

    def parameter(self, name: str, init) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = torch.as_tensor(np.asarray(init), dtype=self.dtype).clone()
        t.requires_grad_(True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def named(self):
        return list(self._params.items())

    def tensors(self):
        return list(self._params.values())

    def manifest(self):
        return [(k, tuple(v.shape)) for k, v in self._params.items()]

    @property
    def n_params(self) -> int:
        return sum(v.numel() for v in self._params.values())

    def flat(self) -> np.ndarray:
        with torch.no_grad():
            return np.concatenate(
                [v.detach().cpu().numpy().ravel() for v in self._params.values()]
            ) if self._params else np.zeros(0, dtype=np.float32)

    def load_flat(self, vec):
        vec = np.asarray(vec)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {vec.size}")
        i = 0
        with torch.no_grad():
            for v in self._params.values():
                n = v.numel()
                v.copy_(torch.as_tensor(vec[i : i + n].reshape(v.shape), dtype=self.dtype))
                i += n

    def record(self, fn, *args, **kwargs):
        """Run fn and remember it; replay() re-executes the recorded calls."""
        out = fn(*args, **kwargs)
        self._records.append((fn, args, kwargs))
        return out

    def replay(self):
        return [fn(*args, **kwargs) for fn, args, kwargs in self._records]


def param_gradient(loss: torch.Tensor, tape: ParamTape) -> np.ndarray:
    """d(loss)/dθ for every tape parameter, flat in manifest order.

    Rejects non-finite losses before any accumulation; parameters are left
    untouched (no .grad side effects).
    """
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"loss is not finite: {float(loss.detach())}")
    grads = torch.autograd.grad(
        loss, tape.tensors(), retain_graph=False, allow_unused=True
    )
    out = []
    for g, t in zip(grads, tape.tensors()):
        out.append(
            np.zeros(t.numel(), dtype=np.float64)
            if g is None
            else g.detach().cpu().numpy().astype(np.float64).ravel()
        )
    return np.concatenate(out) if out else np.zeros(0)


def gradient_check(f, p, h: float) -> dict:
    """Compare jet first derivatives of f at p against central differences.

    Returns per-axis relative errors plus the raw gradients. Large errors at
    non-differentiable points are diagnostic, not failures.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    pt = torch.as_tensor(p, dtype=torch.float64)
    jet = eval_with_jets(f, pt)
    jet_grad = jet.grad.detach().squeeze(-1)

    def fval(q):
        return f(Jet2.seed(q)).value.detach()

    fd = torch.zeros_like(jet_grad)
    for k in range(N_AXES):
        e = torch.zeros(N_AXES, dtype=torch.float64)
        e[k] = h
        fd[..., k] = ((fval(pt + e) - fval(pt - e)) / (2 * h)).squeeze(-1)
    denom = torch.maximum(jet_grad.abs(), fd.abs()).clamp_min(1e-12)
    rel = (jet_grad - fd).abs() / denom
    # absolute scale guard: treat tiny absolute disagreement as zero error
    rel = torch.where((jet_grad - fd).abs() < 1e-9, torch.zeros_like(rel), rel)
    return {
        "jet_grad": jet_grad.numpy(),
        "fd_grad": fd.numpy(),
        "rel_err": rel.numpy(),
        "max_rel_err": float(rel.max()) if rel.numel() else 0.0,
    }
