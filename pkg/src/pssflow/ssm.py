"""Perturbed, diagonalized selective state space layer.

The state matrix starts from HiPPO-LegS, receives a seeded Gaussian
perturbation scaled to a fixed fraction of its Frobenius norm, and is then
diagonalized. Inputs drive per-position B, C and step size, and the diagonal
recurrence is evaluated either step by step or with a log-depth associative
scan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericError, ResampleRequired, ValidationError

RECON_TOL = 1e-6
STABLE_REAL = -1e-4
PROMOTE_COND = 1e4
RECURRENT = "recurrent"
PARALLEL = "parallel"


def hippo_legs(n: int) -> np.ndarray:
    """HiPPO-LegS state matrix (lower triangular, diagonal ``-(k+1)``)."""
    if n < 1:
        raise ValidationError("state dimension must be >= 1")
    q = np.sqrt(2.0 * np.arange(n) + 1.0)
    a = -np.tril(np.outer(q, q), k=-1)
    a[np.diag_indices(n)] = -(np.arange(n) + 1.0)
    return a


def sample_perturbation(a: np.ndarray, scale: float = 0.1, seed: int = 0) -> np.ndarray:
    """Gaussian matrix rescaled so that ``||E||_F == scale * ||A||_F``."""
    if scale <= 0:
        raise ValidationError("perturbation scale must be positive")
    e = np.random.default_rng(seed).standard_normal(a.shape)
    return e * (scale * np.linalg.norm(a) / np.linalg.norm(e))


@dataclass(frozen=True)
class Spectrum:
    """Eigendecomposition of ``A + E`` with stability-projected eigenvalues."""

    eigenvalues: np.ndarray
    raw_eigenvalues: np.ndarray
    basis: np.ndarray
    basis_inv: np.ndarray
    recon_error: float
    n_projected: int

    @property
    def condition(self) -> float:
        return float(np.linalg.cond(self.basis))

    @property
    def min_gap(self) -> float:
        lam = self.eigenvalues
        if len(lam) < 2:
            return math.inf
        d = np.abs(lam[:, None] - lam[None, :])
        d[np.diag_indices(len(lam))] = np.inf
        return float(d.min())


def project_stable(lam):
    """Move eigenvalues with non-negative real part to ``Re = STABLE_REAL``."""
    if isinstance(lam, torch.Tensor):
        re = torch.where(lam.real >= 0, torch.full_like(lam.real, STABLE_REAL), lam.real)
        return torch.complex(re, lam.imag)
    lam = np.array(lam, dtype=complex)
    lam.real[lam.real >= 0] = STABLE_REAL
    return lam


def perturb_then_diagonalize(a: np.ndarray, e: np.ndarray) -> Spectrum:
    """Diagonalize ``A* = A + E`` in float64.

    Raises ``ResampleRequired`` when the eigenbasis does not reconstruct
    ``A*`` to ``RECON_TOL`` relative Frobenius error, which is how
    (numerically) defective matrices show up.
    """
    a = np.asarray(a, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if a.shape != e.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"A and E must be equal square shapes, got {a.shape} and {e.shape}")
    a_star = a + e
    lam, v = np.linalg.eig(a_star)
    try:
        v_inv = np.linalg.inv(v)
    except np.linalg.LinAlgError as exc:
        raise ResampleRequired("eigenbasis is singular") from exc
    recon = (v * lam) @ v_inv
    err = float(np.linalg.norm(recon - a_star) / max(np.linalg.norm(a_star), 1e-300))
    if not np.isfinite(err) or err > RECON_TOL:
        raise ResampleRequired(f"eigen-reconstruction error {err:.3e} exceeds {RECON_TOL:g}")
    order = np.lexsort((lam.imag, lam.real))
    lam, v = lam[order], v[:, order]
    v_inv = v_inv[order, :]
    proj = project_stable(lam)
    return Spectrum(proj, lam, v, v_inv, err, int((lam.real >= 0).sum()))


def build_spectrum(
    n: int, init: str = "ptd", scale: float = 0.1, seed: int = 0, max_tries: int = 16
) -> tuple[np.ndarray, np.ndarray, Spectrum]:
    """Construct ``(A, E, spectrum)``; ``init='hippo'`` uses ``E = 0``.

    Rejected decompositions are retried with the next derived seed.
    """
    a = hippo_legs(n)
    if init == "hippo":
        e = np.zeros_like(a)
        return a, e, perturb_then_diagonalize(a, e)
    if init != "ptd":
        raise ValidationError(f"unknown init {init!r}")
    last = None
    for attempt in range(max_tries):
        e = sample_perturbation(a, scale, seed=np.random.SeedSequence([seed, attempt]))
        try:
            return a, e, perturb_then_diagonalize(a, e)
        except ResampleRequired as exc:
            last = exc
    raise ResampleRequired(f"no acceptable perturbation after {max_tries} tries: {last}")


def discretize_zoh(lam, delta):
    """Return ``(exp(delta * lam), delta)``; B uses the first-order ``delta * B``."""
    if isinstance(delta, torch.Tensor):
        if (delta <= 0).any():
            raise ValidationError("step size must be positive")
        return torch.exp(delta * lam), delta
    if np.any(np.asarray(delta) <= 0):
        raise ValidationError("step size must be positive")
    return np.exp(np.asarray(delta) * lam), delta


def _first_bad_position(t: torch.Tensor) -> int | None:
    """Index along dim 1 of the first non-finite entry, or None."""
    bad = ~torch.isfinite(torch.view_as_real(t) if t.is_complex() else t)
    if not bad.any():
        return None
    per_pos = bad.reshape(bad.shape[0], bad.shape[1], -1).any(-1).any(0)
    return int(torch.nonzero(per_pos)[0, 0])


def scan_recurrent(a_bar: torch.Tensor, bx: torch.Tensor) -> torch.Tensor:
    """``h_l = a_l * h_{l-1} + bx_l`` from ``h_0 = 0``, position by position along dim 1."""
    h = torch.zeros_like(bx[:, 0])
    out = []
    for l in range(bx.shape[1]):
        h = a_bar[:, l] * h + bx[:, l]
        out.append(h)
    return torch.stack(out, dim=1)


def _doubling_scan(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    length = b.shape[1]
    off = 1
    while off < length:
        b = torch.cat([b[:, :off], a[:, off:] * b[:, :-off] + b[:, off:]], dim=1)
        a = torch.cat([a[:, :off], a[:, off:] * a[:, :-off]], dim=1)
        off *= 2
    return b


class _ParallelScan(torch.autograd.Function):
    """Doubling scan with an adjoint that is itself a reversed doubling scan."""

    @staticmethod
    def forward(ctx, a_bar, bx):
        h = _doubling_scan(a_bar, bx)
        ctx.save_for_backward(a_bar, h)
        return h

    @staticmethod
    def backward(ctx, g):
        a_bar, h = ctx.saved_tensors
        # adjoint: gb_l = g_l + conj(a_{l+1}) gb_{l+1}
        coef = torch.cat([a_bar[:, 1:].conj(), torch.zeros_like(a_bar[:, :1])], dim=1)
        gb = _doubling_scan(coef.flip(1), g.flip(1)).flip(1)
        h_prev = torch.cat([torch.zeros_like(h[:, :1]), h[:, :-1]], dim=1)
        return gb * h_prev.conj(), gb


def scan_parallel(a_bar: torch.Tensor, bx: torch.Tensor) -> torch.Tensor:
    """Same recurrence via Hillis-Steele doubling over ``(a, b)`` pairs.

    Pairs compose as ``(a1, b1) then (a2, b2) -> (a2 a1, a2 b1 + b2)``; after
    ``ceil(log2 L)`` rounds the ``b`` slot holds every prefix.
    """
    if torch.is_grad_enabled() and (a_bar.requires_grad or bx.requires_grad):
        return _ParallelScan.apply(a_bar, bx)
    return _doubling_scan(a_bar, bx)


def softplus_inverse(y: float) -> float:
    return math.log(math.expm1(y))


class SelectiveSSM(nn.Module):
    """Selective diagonal SSM over ``(batch, length, channels)`` inputs.

    ``A`` and ``E`` are kept as buffers together with the accepted spectrum.
    With ``train_perturbation`` the perturbation becomes a parameter and the
    spectrum is recomputed from ``A + E`` on every call.
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 16,
        init: str = "ptd",
        seed: int = 0,
        perturb_scale: float = 0.1,
        delta_min: float = 1e-3,
        delta_max: float = 1e-1,
        delta_init: float = 1e-2,
        train_perturbation: bool = False,
        half_spectrum: bool = True,
    ):
        super().__init__()
        if not 0 < delta_min < delta_max:
            raise ValidationError("need 0 < delta_min < delta_max")
        self.d_model, self.d_state = d_model, d_state
        self.init, self.delta_min, self.delta_max = init, delta_min, delta_max
        self.train_perturbation = train_perturbation
        self.half_spectrum = half_spectrum

        a, e, spec = build_spectrum(d_state, init, perturb_scale, seed)
        # an ill-conditioned eigenbasis cancels catastrophically in float32
        self.promote = spec.condition > PROMOTE_COND
        self.register_buffer("A", torch.tensor(a, dtype=torch.float32))
        if train_perturbation:
            self.E = nn.Parameter(torch.tensor(e, dtype=torch.float32))
        else:
            self.register_buffer("E", torch.tensor(e, dtype=torch.float32))
        # complex quantities are split so that .double() converts them too
        # promoted systems keep float64 copies so the basis is not rounded to float32
        sdt = torch.float64 if self.promote else torch.float32
        for name, val in (("lam", spec.eigenvalues), ("V", spec.basis), ("V_inv", spec.basis_inv)):
            self.register_buffer(name + "_re", torch.tensor(val.real, dtype=sdt))
            self.register_buffer(name + "_im", torch.tensor(val.imag, dtype=sdt))

        self.proj_b = nn.Linear(d_model, d_state, bias=False)
        self.proj_c = nn.Linear(d_model, d_state, bias=False)
        self.proj_delta = nn.Linear(d_model, d_model)
        nn.init.normal_(self.proj_delta.weight, std=0.02)
        nn.init.constant_(self.proj_delta.bias, softplus_inverse(delta_init))
        self.d_skip = nn.Parameter(torch.ones(d_model))

    def spectral(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Eigenvalues, eigenbasis and inverse as complex tensors."""
        if self.train_perturbation:
            a_star = (self.A + self.E).double()
            lam, v = torch.linalg.eig(a_star)
            cdt = torch.complex128 if self.promote or self.A.dtype == torch.float64 else torch.complex64
            return project_stable(lam).to(cdt), v.to(cdt), torch.linalg.inv(v).to(cdt)
        return (
            torch.complex(self.lam_re, self.lam_im),
            torch.complex(self.V_re, self.V_im),
            torch.complex(self.V_inv_re, self.V_inv_im),
        )

    def selective_params(self, x: torch.Tensor):
        """Input-dependent ``(B, C, delta)`` with shapes (b,L,N), (b,L,N), (b,L,D)."""
        pos = _first_bad_position(x)
        if pos is not None:
            raise NumericError("non-finite SSM input", pos)
        b = self.proj_b(x)
        c = self.proj_c(x)
        delta = torch.clamp(F.softplus(self.proj_delta(x)), self.delta_min, self.delta_max)
        return b, c, delta

    def forward(self, x: torch.Tensor, mode: str = PARALLEL) -> torch.Tensor:
        b, c, delta = self.selective_params(x)
        lam, v, v_inv = self.spectral()
        out_dtype = x.dtype
        if self.promote:
            x, b, c, delta = (t.double() for t in (x, b, c, delta))
            lam, v, v_inv = (t.to(torch.complex128) for t in (lam, v, v_inv))
        cdt = lam.dtype
        # move B and C into the eigenbasis: z = V^-1 h
        b_t = b.to(cdt) @ v_inv.transpose(0, 1)
        c_t = c.to(cdt) @ v
        if self.half_spectrum:
            # real A*: conjugate eigenpairs carry conjugate states, so keep
            # Im >= 0 and count each complex pair twice in the real part
            keep = lam.imag >= 0
            lam, b_t = lam[keep], b_t[..., keep]
            c_t = c_t[..., keep] * torch.where(lam.imag > 0, 2.0, 1.0).to(lam.real.dtype)
        if not lam.imag.any():
            # an all-real spectrum has real eigenvectors; stay in real arithmetic
            lam, b_t, c_t = lam.real, b_t.real, c_t.real
            cdt = lam.dtype
        a_bar, b_scale = discretize_zoh(lam, delta.unsqueeze(-1))
        bx = (b_scale[..., 0] * x).to(cdt).unsqueeze(-1) * b_t.unsqueeze(2)
        if mode == RECURRENT:
            h = scan_recurrent(a_bar, bx)
        elif mode == PARALLEL:
            h = scan_parallel(a_bar, bx)
        else:
            raise ValidationError(f"unknown scan mode {mode!r}")
        pos = _first_bad_position(h)
        if pos is not None:
            raise NumericError("overflow or NaN during scan", pos)
        y = (h * c_t.unsqueeze(2)).sum(-1)
        if y.is_complex():
            y = y.real
        y = y + self.d_skip * x
        return y.to(out_dtype)

    def ptd_penalty(self) -> torch.Tensor:
        return torch.linalg.norm(self.E)

    @torch.no_grad()
    def report(self, n_grid: int = 50) -> dict:
        lam = self.spectral()[0].detach().to(torch.complex128).cpu().numpy()
        ratio = float(torch.linalg.norm(self.E) / torch.linalg.norm(self.A))
        grid = np.linspace(self.delta_min, self.delta_max, n_grid)
        max_abar = float(np.abs(np.exp(grid[:, None] * lam[None, :])).max())
        gaps = np.abs(lam[:, None] - lam[None, :])
        gaps[np.diag_indices(len(lam))] = np.inf
        return {
            "init": self.init,
            "n": self.d_state,
            "eigenvalues": [[float(z.real), float(z.imag)] for z in lam],
            "frobenius_ratio": ratio,
            "min_eigen_gap": float(gaps.min()) if len(lam) > 1 else None,
            "max_abs_a_bar": max_abar,
            "delta_grid": [float(grid[0]), float(grid[-1]), n_grid],
        }
