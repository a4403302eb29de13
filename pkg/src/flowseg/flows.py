"""Planar and radial flow steps used in the generative direction only.

Every step maps ``z -> (z_out, log_det)`` where ``log_det`` is
``log|det dz_out/dz|``.  Parameters are stored raw (unconstrained) and mapped
through invertibility-preserving reparameterizations before use, so any raw
value yields a bijection.

Parameters may carry a leading batch axis, which is how the posterior network
amortizes one flow per example: ``u_raw`` of shape ``(B, L)`` pairs with ``z``
of shape ``(B, L)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .autodiff import Tensor, as_tensor

SINGULAR_TOL = 1e-12
MAX_INVERT_ITERS = 10_000


class SingularJacobianError(ArithmeticError):
    pass


class InversionError(RuntimeError):
    pass


def _dot(a: Tensor, b: Tensor) -> Tensor:
    return (a * b).sum(axis=-1, keepdims=True)


@dataclass
class PlanarParams:
    u_raw: Tensor
    w: Tensor
    b: Tensor

    def __post_init__(self):
        self.u_raw, self.w, self.b = as_tensor(self.u_raw), as_tensor(self.w), as_tensor(self.b)
        if self.b.ndim == self.w.ndim - 1:
            self.b = self.b.reshape(self.b.shape + (1,))
        if np.any(np.sum(self.w.data**2, axis=-1) == 0):
            raise ValueError("planar flow: w must be non-zero")

    @classmethod
    def identity(cls, latent_dim: int) -> "PlanarParams":
        w = np.zeros(latent_dim)
        w[0] = 1.0
        # u_raw chosen so that the constrained u is exactly zero
        u = np.zeros(latent_dim)
        u[0] = np.log(np.e - 1.0)
        return cls(u, w, np.zeros(1))


@dataclass
class RadialParams:
    z0_ref: Tensor
    alpha_raw: Tensor
    beta_raw: Tensor

    def __post_init__(self):
        self.z0_ref = as_tensor(self.z0_ref)
        self.alpha_raw = as_tensor(self.alpha_raw)
        self.beta_raw = as_tensor(self.beta_raw)
        for name in ("alpha_raw", "beta_raw"):
            t = getattr(self, name)
            if t.ndim == self.z0_ref.ndim - 1:
                setattr(self, name, t.reshape(t.shape + (1,)))

    @classmethod
    def identity(cls, latent_dim: int) -> "RadialParams":
        return cls(np.zeros(latent_dim), np.zeros(1), np.zeros(1))


FlowParams = Union[PlanarParams, RadialParams]


def constrain_planar(p: PlanarParams) -> tuple[Tensor, Tensor, Tensor]:
    """Return (u_hat, w, b) with w.u_hat = -1 + softplus(w.u_raw) >= -1."""
    wu = _dot(p.w, p.u_raw)
    m = -1.0 + wu.softplus()
    w_sq = _dot(p.w, p.w)
    u_hat = p.u_raw + (m - wu) * p.w / w_sq
    return u_hat, p.w, p.b


def planar_forward(p: PlanarParams, z) -> tuple[Tensor, Tensor]:
    z = as_tensor(z)
    u_hat, w, b = constrain_planar(p)
    act = (_dot(w, z) + b).tanh()
    z_out = z + u_hat * act
    # u_hat . psi(z), psi = (1 - tanh^2) w
    det = 1.0 + (1.0 - act * act) * _dot(u_hat, w)
    if np.any(np.abs(det.data) < SINGULAR_TOL):
        raise SingularJacobianError("planar flow: |1 + u.psi(z)| below 1e-12")
    log_det = det.abs().log()
    return z_out, log_det.sum(axis=-1)


def constrain_radial(p: RadialParams) -> tuple[Tensor, Tensor, Tensor]:
    """Return (alpha, beta, x0) with alpha > 0 and beta >= -alpha."""
    alpha = p.alpha_raw.softplus()
    beta = -alpha + p.beta_raw.softplus()
    return alpha, beta, p.z0_ref


def radial_forward(p: RadialParams, z) -> tuple[Tensor, Tensor]:
    """z_out = z + beta * (z - x0) / (alpha + r), r = |z - x0|."""
    z = as_tensor(z)
    alpha, beta, x0 = constrain_radial(p)
    diff = z - x0
    r = _dot(diff, diff).sqrt()
    h = 1.0 / (alpha + r)
    bh = beta * h
    z_out = z + bh * diff
    # beta * h'(r) * r with h' = -1/(alpha+r)^2; vanishes at r = 0
    bhr = -beta * h * h * r
    dim = z.shape[-1]
    log_det = (dim - 1) * (1.0 + bh).log() + (1.0 + bh + bhr).log()
    return z_out, log_det.sum(axis=-1)


def step_forward(p: FlowParams, z) -> tuple[Tensor, Tensor]:
    if isinstance(p, PlanarParams):
        return planar_forward(p, z)
    if isinstance(p, RadialParams):
        return radial_forward(p, z)
    raise TypeError(f"unknown flow step {type(p).__name__}")


@dataclass
class FlowChain:
    steps: list = field(default_factory=list)

    def __post_init__(self):
        kinds = {type(s) for s in self.steps}
        if len(kinds) > 1:
            raise ValueError("flow chain must be homogeneous (all planar or all radial)")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def kind(self) -> str:
        if not self.steps:
            return "none"
        return "planar" if isinstance(self.steps[0], PlanarParams) else "radial"


def chain_forward(c: FlowChain, z0) -> tuple[Tensor, Tensor]:
    """Apply the steps in order; returns (z_K, sum of per-step log-dets)."""
    z = as_tensor(z0)
    total = None
    for step in c.steps:
        z, ld = step_forward(step, z)
        total = ld if total is None else total + ld
    if total is None:
        total = Tensor(np.zeros(z.shape[:-1]))
    return z, total


# -- numerical inversion (test oracle for bijectivity) ----------------------


def _solve_monotone(g, target: float, lo: float, hi: float, dg) -> float:
    """Safeguarded Newton for a non-decreasing scalar g(t) = target."""
    while g(lo) > target:
        lo = lo - 2.0 * (hi - lo + 1.0)
    while g(hi) < target:
        hi = hi + 2.0 * (hi - lo + 1.0)
    t = 0.5 * (lo + hi)
    for _ in range(MAX_INVERT_ITERS):
        r = g(t) - target
        if r == 0.0:
            return t
        if r > 0:
            hi = t
        else:
            lo = t
        slope = dg(t)
        nxt = t - r / slope if slope > 0 else 0.5 * (lo + hi)
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if nxt == t or hi - lo <= 1e-15 * max(1.0, abs(t)):
            return nxt
        t = nxt
    raise InversionError("flow inversion did not converge in 10^4 iterations")


def numeric_invert(step: FlowParams, z_out, tol: float = 1e-8) -> np.ndarray:
    """Invert a single (unbatched) flow step numerically."""
    y = np.asarray(z_out.data if isinstance(z_out, Tensor) else z_out, dtype=np.float64)
    if isinstance(step, PlanarParams):
        u_hat, w, b = (t.data.reshape(-1) for t in constrain_planar(step))
        wu = float(w @ u_hat)
        bb = float(b[0])
        target = float(w @ y)
        # solve a + wu * tanh(a + b) = w.y for a = w.z
        a = _solve_monotone(
            lambda s: s + wu * np.tanh(s + bb),
            target,
            target - abs(wu) - 1.0,
            target + abs(wu) + 1.0,
            lambda s: 1.0 + wu * (1.0 - np.tanh(s + bb) ** 2),
        )
        z = y - u_hat * np.tanh(a + bb)
    elif isinstance(step, RadialParams):
        alpha, beta, x0 = (t.data.reshape(-1) for t in constrain_radial(step))
        alpha, beta = float(alpha[0]), float(beta[0])
        d_out = y - x0
        r_out = float(np.linalg.norm(d_out))
        if r_out == 0.0:
            z = x0.copy()
        else:
            # r_out = r * (1 + beta / (alpha + r)), monotone in r >= 0
            r = _solve_monotone(
                lambda s: s + beta * s / (alpha + s),
                r_out,
                0.0,
                r_out + abs(beta) + 1.0,
                lambda s: 1.0 + beta * alpha / (alpha + s) ** 2,
            )
            z = x0 + d_out / (1.0 + beta / (alpha + r))
    else:
        raise TypeError(f"unknown flow step {type(step).__name__}")
    resid = np.linalg.norm(step_forward(step, z)[0].data - y)
    if not resid <= tol * max(1.0, np.linalg.norm(y)):
        raise InversionError(f"flow inversion residual {resid:.3g} exceeds {tol:g}")
    return z


def softplus_inverse(y: float) -> float:
    """Raw value whose softplus equals ``y`` (y > 0)."""
    return float(y + np.log(-np.expm1(-y)))


__all__ = [
    "PlanarParams",
    "RadialParams",
    "FlowChain",
    "constrain_planar",
    "constrain_radial",
    "planar_forward",
    "radial_forward",
    "step_forward",
    "chain_forward",
    "numeric_invert",
    "softplus_inverse",
    "SingularJacobianError",
    "InversionError",
]
