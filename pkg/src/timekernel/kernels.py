"""Ground-truth kernels and the numerical checks run against them.

Contents:

* analytic translation-invariant kernels with their spectral samplers
  (:func:`gaussian_spec`) and even periodic kernels with known Fourier
  coefficients (:func:`triangle_spec`, :func:`cosine_spec`);
* :func:`claim1_bound`, the uniform-approximation tail bound for random
  Fourier features;
* :func:`mc_approximation_study`, sup-norm error of the Monte-Carlo feature
  map against the analytic kernel;
* :func:`eigenfunction_residual` and :func:`truncation_decay`, which check
  that the Fourier basis diagonalises a periodic kernel's integral operator
  and that truncated series converge uniformly;
* :func:`jacobi_eigvalsh`, a dependency-free symmetric eigenvalue routine
  used for PSD checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np

from .embeddings import BochnerNonParam, export_phi_matrix
from .streams import rng_stream
from .validation import InputError, SpecError, check_positive

__all__ = [
    "KernelSpec",
    "PeriodicKernelSpec",
    "gaussian_spec",
    "triangle_spec",
    "cosine_spec",
    "KERNELS",
    "PERIODIC_KERNELS",
    "Bound",
    "claim1_bound",
    "mc_approximation_study",
    "simpson",
    "eigenfunction_residual",
    "eigenvalue",
    "truncation_decay",
    "jacobi_eigvalsh",
    "min_eigenvalue",
    "gram_matrix",
]


@dataclass(frozen=True)
class KernelSpec:
    """Translation-invariant kernel ``psi(t1 - t2)`` with its spectral measure."""

    name: str
    psi: Callable[[np.ndarray], np.ndarray]
    spectral_sampler: Callable[[np.random.Generator, int], np.ndarray]
    sigma_p2: float
    t_max: float

    def validate(self, grid=None) -> None:
        grid = np.linspace(0.0, self.t_max, 257) if grid is None else np.asarray(grid, float)
        if abs(float(self.psi(np.array([0.0]))[0]) - 1.0) > 1e-12:
            raise SpecError(f"{self.name}: psi(0) must equal 1")
        if np.max(np.abs(self.psi(grid) - self.psi(-grid))) > 1e-12:
            raise SpecError(f"{self.name}: psi is not even")


@dataclass(frozen=True)
class PeriodicKernelSpec:
    """Even kernel on ``[-1, 1]`` with ``psi(t) = a0/2 + sum_j a_j cos(pi j t)``.

    ``coeff(j)`` returns ``a_j`` for any ``j >= 0``.  ``psi`` is evaluated on
    its 2-periodic extension.
    """

    name: str
    psi_base: Callable[[np.ndarray], np.ndarray]
    coeff: Callable[[int], float]
    lipschitz: float
    extras: dict = field(default_factory=dict)

    def psi(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.psi_base(np.mod(t + 1.0, 2.0) - 1.0)

    def fourier_coeffs(self, n: int) -> np.ndarray:
        """``[a_0, a_1, ..., a_n]``."""
        return np.array([self.coeff(j) for j in range(n + 1)])

    def partial_sum(self, t, d: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        a = self.fourier_coeffs(d)
        j = np.arange(1, d + 1)
        return a[0] / 2.0 + np.cos(np.pi * np.multiply.outer(t, j)) @ a[1:]

    def check_even(self, n: int = 1001) -> None:
        t = np.linspace(0.0, 1.0, n)
        if np.max(np.abs(self.psi(t) - self.psi(-t))) > 1e-12:
            raise SpecError(f"{self.name}: psi is not even, the Fourier-basis argument needs an even kernel")


def gaussian_spec(sigma: float = 1.0, t_max: float = 4.0) -> KernelSpec:
    """``psi(D) = exp(-sigma^2 D^2 / 2)``; spectral measure ``N(0, sigma^2)``."""
    check_positive(sigma=sigma, t_max=t_max)
    return KernelSpec(
        name="gaussian",
        psi=lambda t: np.exp(-0.5 * (sigma * np.asarray(t, dtype=np.float64)) ** 2),
        spectral_sampler=lambda rng, n: sigma * rng.standard_normal(n),
        sigma_p2=sigma**2,
        t_max=t_max,
    )


def _triangle_coeff(j: int) -> float:
    if j == 0:
        return 1.0
    return 4.0 / (math.pi**2 * j**2) if j % 2 else 0.0


def triangle_spec() -> PeriodicKernelSpec:
    """``psi(t) = 1 - |t|``: the triangle wave, 1-Lipschitz, odd harmonics only."""
    return PeriodicKernelSpec(
        name="triangle",
        psi_base=lambda t: 1.0 - np.abs(t),
        coeff=_triangle_coeff,
        lipschitz=1.0,
    )


def cosine_spec() -> PeriodicKernelSpec:
    """``psi(t) = cos(pi t)``: a single harmonic with coefficient 1."""
    return PeriodicKernelSpec(
        name="cosine",
        psi_base=lambda t: np.cos(np.pi * t),
        coeff=lambda j: 1.0 if j == 1 else 0.0,
        lipschitz=math.pi,
    )


KERNELS = {"gaussian": gaussian_spec}
PERIODIC_KERNELS = {"triangle": triangle_spec, "cosine": cosine_spec}


class Bound(NamedTuple):
    value: float  # clamped to [0, 1]
    raw: float


def claim1_bound(sigma_p2: float, t_max: float, eps: float, d: float) -> Bound:
    """Tail bound ``4 sigma_p sqrt(t_max/eps) exp(-d eps^2 / 32)`` on the sup error.

    ``sigma_p`` is the square root of the spectral second moment.
    """
    check_positive(sigma_p2=sigma_p2, t_max=t_max, eps=eps, d=d)
    raw = 4.0 * math.sqrt(sigma_p2) * math.sqrt(t_max / eps) * math.exp(-d * eps * eps / 32.0)
    return Bound(min(max(raw, 0.0), 1.0), raw)


def _seed_list(seeds) -> list[int]:
    if isinstance(seeds, (int, np.integer)):
        return list(range(int(seeds)))
    return [int(s) for s in seeds]


def mc_approximation_study(
    spec: KernelSpec,
    d_list: Iterable[int],
    seeds=20,
    grid_step: float = 0.05,
) -> list[dict]:
    """Sup-norm error of random Fourier features against ``spec.psi`` on ``[0, t_max]``.

    For every ``d`` and seed the frequencies are drawn from the spectral
    sampler, a :class:`BochnerNonParam` map is built on them, and the error
    ``|<Phi(D), Phi(0)> - psi(D)|`` is maximised over the lag grid.  Returns one
    row per ``d`` with the mean and max of the per-seed sup errors.
    """
    d_list = [int(d) for d in d_list]
    if not d_list:
        raise InputError("d_list must be non-empty")
    if any(b < a for a, b in zip(d_list, d_list[1:])):
        raise InputError("d_list must be ascending")
    seeds = _seed_list(seeds)
    n = int(round(spec.t_max / grid_step))
    grid = np.linspace(0.0, n * grid_step, n + 1)
    truth = spec.psi(grid)
    rows = []
    for d in d_list:
        errs = []
        for s in seeds:
            omega = spec.spectral_sampler(rng_stream(s, f"kernel_lab.mc.d{d}"), d)
            phi = export_phi_matrix(BochnerNonParam(d=d, omega=omega).fit(), grid)
            est = phi @ phi[0]
            errs.append(float(np.max(np.abs(est - truth))))
        rows.append({"d": d, "mean_sup_error": float(np.mean(errs)), "max_sup_error": float(np.max(errs))})
    return rows


def simpson(values: np.ndarray, h: float, axis: int = -1) -> np.ndarray:
    """Composite Simpson rule on equally spaced samples (odd count)."""
    n = values.shape[axis]
    if n < 3 or n % 2 == 0:
        raise InputError("Simpson's rule needs an odd number (>= 3) of samples")
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return np.tensordot(values, w, axes=([axis], [0])) * (h / 3.0)


def eigenfunction_residual(pspec: PeriodicKernelSpec, j: int, quad_points: int = 512) -> float:
    """Max residual of ``T cos(pi j .) = c_j cos(pi j .)`` and the sine analogue.

    ``T f(t1) = int_{-1}^{1} psi(t1 - t2) f(t2) dt2`` is evaluated by composite
    Simpson with ``quad_points`` intervals on 64 evaluation points
    ``t1 = -1 + m/32``; ``c_j`` comes from the same rule.  When ``quad_points``
    is a multiple of 128 the evaluation points and their shifts by one land on
    quadrature nodes, so kinks of a piecewise-smooth ``psi`` never fall inside
    a Simpson panel.
    """
    if j < 1:
        raise InputError("j must be >= 1")
    if quad_points < 512 or quad_points % 2:
        raise InputError("quad_points must be an even number >= 512")
    pspec.check_even()
    t2 = np.linspace(-1.0, 1.0, quad_points + 1)
    h = 2.0 / quad_points
    t1 = -1.0 + np.arange(64) / 32.0
    c_j = float(simpson(pspec.psi(t2) * np.cos(np.pi * j * t2), h))
    kern = pspec.psi(t1[:, None] - t2[None, :])
    worst = 0.0
    for basis in (np.cos, np.sin):
        lhs = simpson(kern * basis(np.pi * j * t2)[None, :], h, axis=1)
        worst = max(worst, float(np.max(np.abs(lhs - c_j * basis(np.pi * j * t1)))))
    return worst


def eigenvalue(pspec: PeriodicKernelSpec, j: int, quad_points: int = 4096) -> float:
    """``c_j = int_{-1}^{1} psi(u) cos(pi j u) du`` by Simpson quadrature."""
    u = np.linspace(-1.0, 1.0, quad_points + 1)
    return float(simpson(pspec.psi(u) * np.cos(np.pi * j * u), 2.0 / quad_points))


def truncation_decay(pspec: PeriodicKernelSpec, d_list: Iterable[int], step: float = 1e-3) -> list[dict]:
    """Sup error of the degree-``d`` partial Fourier sum over ``[-1, 1]``."""
    n = int(round(2.0 / step))
    t = np.linspace(-1.0, 1.0, n + 1)
    psi = pspec.psi(t)
    return [
        {"d": int(d), "sup_error": float(np.max(np.abs(psi - pspec.partial_sum(t, int(d)))))}
        for d in d_list
    ]


def jacobi_eigvalsh(a, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InputError(f"expected a square matrix, got shape {a.shape}")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:  # theta**2 would overflow; t ~ 1/(2 theta)
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
    return np.sort(np.diag(a))


def min_eigenvalue(a) -> float:
    return float(jacobi_eigvalsh(a)[0])


def gram_matrix(psi: Callable, grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64).reshape(-1)
    return psi(grid[:, None] - grid[None, :])
