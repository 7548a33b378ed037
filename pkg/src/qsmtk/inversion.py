"""Dipole inversion: TKD, unrolled proximal gradient descent, CG oracle.

The proximal gradient iteration is

    X^k = prox_{t_k}( X^{k-1} - t_k A^H (A X^{k-1} - b) ),   X^0 = 0,

with a pluggable proximal map shared across iterations. The learned prior
of a trained network is replaced by deterministic operators here.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dipole import Z_HAT, ForwardOperator, ReconState, unit_direction
from .volume import Grid3, fft3, real_ifft3

log = logging.getLogger(__name__)

TKD_THRESHOLD = 0.2
UNROLLED_ITERATIONS = 3


class DivergenceError(RuntimeError):
    """The data residual grew by more than the divergence factor."""


class ConvergenceWarning(UserWarning):
    pass


# --------------------------------------------------------------------------
# TKD


def tkd_multiplier(kernel: np.ndarray, threshold: float = TKD_THRESHOLD) -> np.ndarray:
    """Inverse multiplier ``1/D~`` with ``|D~| >= threshold``.

    Samples below the threshold are replaced by ``sign(D) * threshold`` with
    ``sign(0) = +1``; DC is treated as ``+threshold``.
    """
    if not 0 < threshold < 2.0 / 3.0:
        raise ValueError(f"TKD threshold must lie in (0, 2/3), got {threshold}")
    sign = np.where(kernel < 0, -1.0, 1.0)
    clamped = np.where(np.abs(kernel) >= threshold, kernel, sign * threshold)
    clamped[0, 0, 0] = threshold
    return 1.0 / clamped


def tkd_invert(b: np.ndarray, H=Z_HAT, threshold: float = TKD_THRESHOLD,
               voxel_size=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Thresholded k-space division of a field map (ppm) into susceptibility."""
    op = ForwardOperator(Grid3(np.shape(b), voxel_size), H)
    return real_ifft3(tkd_multiplier(op.kernel, threshold) * fft3(b))


# --------------------------------------------------------------------------
# proximal operators


class IdentityProx:
    """Proximal map of ``R = 0``."""

    name = "identity"

    def __call__(self, z: ReconState, t: float) -> ReconState:
        return z

    def describe(self) -> dict:
        return {"kind": self.name}


@dataclass
class SoftThresholdProx:
    """Proximal map of ``lam * ||.||_1`` on selected channels.

    Each selected voxel value shrinks toward 0 by ``lam * t``.
    """

    lam: float
    chi33: bool = True
    dbp: bool = True
    name: str = field(default="soft_threshold", init=False)

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"soft threshold needs lam >= 0, got {self.lam}")

    @staticmethod
    def shrink(v: np.ndarray, tau: float) -> np.ndarray:
        return np.sign(v) * np.maximum(np.abs(v) - tau, 0.0)

    def __call__(self, z: ReconState, t: float) -> ReconState:
        tau = self.lam * t
        return ReconState(
            self.shrink(z.chi33, tau) if self.chi33 else z.chi33,
            self.shrink(z.dbp, tau) if self.dbp else z.dbp,
        )

    def describe(self) -> dict:
        return {"kind": self.name, "lam": self.lam, "chi33": self.chi33, "dbp": self.dbp}


def parse_prox(text: str):
    """Parse ``identity`` or ``soft:LAM[:chi33|dbp|both]``."""
    if text == "identity":
        return IdentityProx()
    parts = text.split(":")
    if parts[0] != "soft" or len(parts) not in (2, 3):
        raise ValueError(f"prox must be 'identity' or 'soft:LAM[:chi33|dbp|both]', got {text!r}")
    which = parts[2] if len(parts) == 3 else "both"
    if which not in ("chi33", "dbp", "both"):
        raise ValueError(f"unknown soft-threshold channel selector {which!r}")
    return SoftThresholdProx(float(parts[1]), chi33=which in ("chi33", "both"),
                             dbp=which in ("dbp", "both"))


# --------------------------------------------------------------------------
# objective, Lipschitz constant


def objective(X: ReconState, b: np.ndarray, op: ForwardOperator) -> float:
    """Data term ``0.5 * ||A X - b||^2``."""
    r = op.apply(X) - b
    return 0.5 * float(np.vdot(r, r))


def lipschitz_estimate(grid: Grid3, H=Z_HAT, iters: int = 300, seed: int = 0,
                       history: list | None = None) -> float:
    """Largest eigenvalue of ``A^H A`` by power iteration.

    Starts from a fixed-seed random state. If ``history`` is a list, the
    Rayleigh quotient of every iteration is appended to it.
    """
    if iters < 1:
        raise ValueError(f"power iteration needs iters >= 1, got {iters}")
    op = ForwardOperator(grid, H)
    rng = np.random.default_rng(seed)
    x = ReconState(rng.standard_normal(grid.dims), rng.standard_normal(grid.dims))
    x = x * (1.0 / x.norm())
    estimate = 0.0
    for _ in range(iters):
        y = op.normal(x)
        estimate = x.vdot(y)
        if history is not None:
            history.append(estimate)
        ny = y.norm()
        if ny == 0:
            break
        x = y * (1.0 / ny)
    return estimate


# --------------------------------------------------------------------------
# unrolled proximal gradient descent


@dataclass
class SolveConfig:
    """Settings for :func:`pgd_solve`.

    ``steps`` is either one step size reused every iteration, a sequence of
    ``iterations`` sizes, or ``None`` for ``1/L`` from power iteration.
    """

    iterations: int = UNROLLED_ITERATIONS
    steps: float | Sequence[float] | None = None
    prox: object = field(default_factory=IdentityProx)
    record_residuals: bool = True
    divergence_factor: float = 10.0
    lipschitz_iters: int = 300
    tol: float | None = None

    def step_sizes(self, op: ForwardOperator) -> tuple[list[float], float | None]:
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")
        L = None
        if self.steps is None:
            L = lipschitz_estimate(op.grid, op.H, self.lipschitz_iters)
            steps = [1.0 / L] * self.iterations
        elif np.ndim(self.steps) == 0:
            steps = [float(self.steps)] * self.iterations
        else:
            steps = [float(t) for t in self.steps]
            if len(steps) != self.iterations:
                raise ValueError(f"{len(steps)} step sizes for {self.iterations} iterations")
        if any(not t > 0 for t in steps):
            raise ValueError(f"step sizes must be positive, got {steps}")
        return steps, L


@dataclass
class SolveReport:
    state: ReconState
    residuals: list[float]
    objectives: list[float]
    steps: list[float]
    lipschitz: float | None = None
    iterations_run: int = 0

    def to_dict(self) -> dict:
        return {
            "residuals": self.residuals,
            "objectives": self.objectives,
            "steps": self.steps,
            "lipschitz": self.lipschitz,
            "iterations_run": self.iterations_run,
        }


def pgd_solve(b: np.ndarray, H=Z_HAT, cfg: SolveConfig | None = None,
              voxel_size=(1.0, 1.0, 1.0), op: ForwardOperator | None = None) -> SolveReport:
    """Unrolled proximal gradient descent from ``X^0 = 0``.

    With ``cfg.tol`` set, iteration stops early once the relative residual
    change drops below it (the "converged" mode); otherwise exactly
    ``cfg.iterations`` steps run.
    """
    cfg = cfg or SolveConfig()
    b = np.asarray(b, dtype=float)
    op = op or ForwardOperator(Grid3(b.shape, voxel_size), unit_direction(H))
    steps, L = cfg.step_sizes(op)

    X = ReconState.zeros(b.shape)
    r0 = float(np.linalg.norm(b))
    residuals = [r0]
    objectives = [0.5 * r0 * r0]
    k = 0
    for k, t in enumerate(steps, start=1):
        X = cfg.prox(op.gradient_step(X, b, t), t)
        r = float(np.linalg.norm(op.apply(X) - b))
        residuals.append(r)
        objectives.append(0.5 * r * r)
        if r0 > 0 and r > cfg.divergence_factor * r0:
            raise DivergenceError(
                f"residual grew from {r0:.4g} to {r:.4g} at iteration {k} "
                f"with step size t={t:.6g}; reduce the step size"
            )
        if cfg.tol is not None and abs(residuals[-2] - r) <= cfg.tol * max(residuals[-2], 1e-300):
            break
    log.debug("pgd: %d iterations, residual %.4g -> %.4g", k, r0, residuals[-1])
    if not cfg.record_residuals:
        residuals, objectives = residuals[-1:], objectives[-1:]
    return SolveReport(X, residuals, objectives, steps[:k], L, k)


# --------------------------------------------------------------------------
# conjugate-gradient least-squares oracle


@dataclass
class CGResult:
    state: ReconState
    iterations: int
    relative_residual: float
    converged: bool


def cg_least_squares(b: np.ndarray, H=Z_HAT, max_iter: int = 500, tol: float = 1e-10,
                     lam: float = 0.0, voxel_size=(1.0, 1.0, 1.0),
                     op: ForwardOperator | None = None) -> CGResult:
    """Solve ``(A^H A + lam I) X = A^H b`` by conjugate gradients from 0.

    Stops when the normal-equation residual relative to ``||A^H b||`` is at
    most ``tol``. Not converging within ``max_iter`` is reported through
    ``converged=False`` and a warning; the partial result is still returned.
    """
    if lam < 0:
        raise ValueError(f"Tikhonov weight must be >= 0, got {lam}")
    b = np.asarray(b, dtype=float)
    op = op or ForwardOperator(Grid3(b.shape, voxel_size), unit_direction(H))
    rhs = op.adjoint(b)
    X = ReconState.zeros(b.shape)
    bnorm = rhs.norm()
    if bnorm == 0:
        return CGResult(X, 0, 0.0, True)

    r = rhs.copy()
    p = r.copy()
    rr = r.vdot(r)
    it = 0
    rel = np.sqrt(rr) / bnorm
    while rel > tol and it < max_iter:
        Ap = op.normal(p) + lam * p
        alpha = rr / p.vdot(Ap)
        X = X + alpha * p
        r = r - alpha * Ap
        rr_new = r.vdot(r)
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
        rel = np.sqrt(rr) / bnorm
    converged = bool(rel <= tol)
    if not converged:
        warnings.warn(f"CG stopped at max_iter={max_iter} with relative residual {rel:.3g}",
                      ConvergenceWarning, stacklevel=2)
    return CGResult(X, it, float(rel), converged)
