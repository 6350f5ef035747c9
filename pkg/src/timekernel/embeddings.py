"""Functional time embeddings.

Four trainable feature maps ``t -> Phi(t)`` whose inner products define a
translation-invariant kernel in the time lag:

* :class:`BochnerNormal` -- random Fourier features with frequencies
  ``mu + sigma * eps`` for frozen standard-normal ``eps``.
* :class:`BochnerInvCdf` -- frequencies ``g(u)`` where ``g`` is a small ReLU
  network applied to frozen uniform draws ``u``.
* :class:`BochnerNonParam` -- the frequencies themselves are free parameters.
* :class:`MercerEmbedding` -- truncated Fourier bases over ``k`` base
  frequencies with learned (signed square-root) coefficients.

:class:`PositionalEncoding` is the learned per-position table used as the
time-blind baseline.

All embedders follow the scikit-learn transformer protocol: hyperparameters
live in ``__init__``, ``fit`` initialises the trainable tensors in
``params_`` (optionally using observed time spans to pick the period range)
and ``transform`` returns the feature matrix as a numpy array.  ``embed``
returns the same features as a differentiable :class:`~timekernel.autodiff.Tensor`.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autodiff as ad
from .autodiff import Tensor
from .streams import rng_stream
from .validation import ConfigError, InputError, check_grid, check_is_fitted, check_times

__all__ = [
    "BochnerNormal",
    "BochnerInvCdf",
    "BochnerNonParam",
    "MercerEmbedding",
    "PositionalEncoding",
    "init_frequencies_geometric",
    "kernel_estimate",
    "export_phi_matrix",
    "export_gram",
    "make_embedder",
    "EMBEDDER_NAMES",
]

DEFAULT_TAU_RANGE = (1.0, 100.0)


def init_frequencies_geometric(tau_min: float, tau_max: float, n: int) -> np.ndarray:
    """Periods ``tau_i = tau_min + (tau_max - tau_min) ** (i / n)`` for ``i = 1..n``.

    The matching frequencies are ``1 / tau_i``.  When ``tau_max - tau_min <= 1``
    the formula collapses (every power of a span <= 1 stays <= 1), so a warning
    is issued and log-spaced periods ``tau_min * (tau_max / tau_min) ** (i / n)``
    are returned instead.
    """
    if not (np.isfinite(tau_min) and np.isfinite(tau_max)) or tau_min <= 0:
        raise ConfigError(f"tau_min must be positive and finite, got {tau_min!r}")
    if tau_min >= tau_max:
        raise ConfigError(f"tau_min ({tau_min}) must be smaller than tau_max ({tau_max})")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    i = np.arange(1, n + 1) / n
    span = tau_max - tau_min
    if span <= 1.0:
        warnings.warn(
            f"period span {span:g} <= 1 makes the geometric schedule degenerate; "
            "using log-spaced periods instead",
            RuntimeWarning,
            stacklevel=2,
        )
        return tau_min * (tau_max / tau_min) ** i
    return tau_min + span**i


def _tau_range(est, X) -> tuple[float, float]:
    lo, hi = est.tau_min, est.tau_max
    if X is not None and (lo is None or hi is None):
        spans = check_times(X, name="X").reshape(-1)
        spans = spans[spans > 0]
        if spans.size:
            lo = float(spans.min()) if lo is None else lo
            hi = float(spans.max()) if hi is None else hi
    lo = DEFAULT_TAU_RANGE[0] if lo is None else lo
    hi = DEFAULT_TAU_RANGE[1] if hi is None else hi
    if hi <= lo:
        hi = lo + DEFAULT_TAU_RANGE[1]
    return float(lo), float(hi)


def _as_time_tensor(t) -> Tensor:
    if isinstance(t, Tensor):
        check_times(t.data)
        return t
    return Tensor(check_times(t))


class _TimeEmbedder(TransformerMixin, BaseEstimator):
    """Shared plumbing; subclasses implement ``_init_params`` and ``_features``."""

    def fit(self, X=None, y=None):
        """Initialise trainable parameters; ``X`` are observed time spans (optional)."""
        self._validate_hyperparams()
        self.params_: dict[str, Tensor] = {}
        self._init_params(X)
        for name, p in self.params_.items():
            p.name = name
        return self

    def _validate_hyperparams(self) -> None:
        pass

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        check_is_fitted(self)
        return [p for p in self.params_.values() if p.requires_grad]

    def embed(self, t) -> Tensor:
        """Features for every entry of ``t``; output shape is ``t.shape + (dim,)``."""
        check_is_fitted(self)
        return self._features(_as_time_tensor(t))

    def transform(self, X) -> np.ndarray:
        grid = check_times(X, name="X").reshape(-1)
        return self.embed(grid).data

    def kernel(self, t1, t2) -> Tensor:
        return ad.sum_(ad.mul(self.embed(t1), self.embed(t2)), axis=-1)


class _BochnerBase(_TimeEmbedder):
    @property
    def dim(self) -> int:
        return 2 * self.d

    def _validate_hyperparams(self) -> None:
        if int(self.d) < 1:
            raise ConfigError(f"d must be >= 1, got {self.d}")

    def frequencies(self) -> Tensor:
        raise NotImplementedError

    def _features(self, t: Tensor) -> Tensor:
        omega = self.frequencies()
        phase = ad.mul(ad.reshape(t, t.shape + (1,)), omega)
        feats = ad.stack_last([ad.cos(phase), ad.sin(phase)])
        return ad.scale(feats, math.sqrt(1.0 / self.d))


class BochnerNormal(_BochnerBase):
    """Gaussian spectral measure via the reparameterisation ``omega = mu + sigma * eps``.

    ``sigma`` is kept positive through ``sigma = softplus(rho)``.
    """

    def __init__(self, d: int = 32, mu: float = 0.0, sigma: float = 1.0, random_state: int = 0):
        self.d = d
        self.mu = mu
        self.sigma = sigma
        self.random_state = random_state

    def _validate_hyperparams(self) -> None:
        super()._validate_hyperparams()
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")

    def _init_params(self, X) -> None:
        rng = rng_stream(self.random_state, "embedding.bochner_normal.eps")
        self.eps_ = rng.standard_normal(int(self.d))
        self.eps_.setflags(write=False)
        rho = self.sigma + math.log(-math.expm1(-self.sigma))  # softplus^{-1}
        self.params_["mu"] = Tensor([float(self.mu)], requires_grad=True)
        self.params_["rho"] = Tensor([rho], requires_grad=True)

    def frequencies(self) -> Tensor:
        sigma = ad.softplus(self.params_["rho"])
        return ad.add(self.params_["mu"], ad.mul(sigma, Tensor(self.eps_)))


class BochnerInvCdf(_BochnerBase):
    """Frequencies produced by a 1 -> hidden -> hidden -> 1 ReLU network on frozen uniforms.

    No monotonicity is imposed on the network.  ``omega_scale`` multiplies the
    network output; when left as ``None`` it is set to the highest frequency of
    the geometric period schedule so the initial frequencies sit in the data's
    time scale.
    """

    def __init__(
        self,
        d: int = 32,
        hidden: int = 32,
        omega_scale: float | None = None,
        tau_min: float | None = None,
        tau_max: float | None = None,
        random_state: int = 0,
    ):
        self.d = d
        self.hidden = hidden
        self.omega_scale = omega_scale
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.random_state = random_state

    def _init_params(self, X) -> None:
        rng = rng_stream(self.random_state, "embedding.bochner_invcdf.u")
        u = rng.uniform(size=int(self.d))
        self.u_ = np.clip(u, 1e-6, 1 - 1e-6)
        self.u_.setflags(write=False)
        if self.omega_scale is None:
            lo, hi = _tau_range(self, X)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self.omega_scale_ = float(1.0 / init_frequencies_geometric(lo, hi, int(self.d))[0])
        else:
            self.omega_scale_ = float(self.omega_scale)
        wrng = rng_stream(self.random_state, "embedding.bochner_invcdf.theta")
        h = int(self.hidden)
        for name, (fan_in, fan_out) in {"1": (1, h), "2": (h, h), "3": (h, 1)}.items():
            a = math.sqrt(6.0 / (fan_in + fan_out))
            self.params_[f"W{name}"] = Tensor(wrng.uniform(-a, a, (fan_in, fan_out)), requires_grad=True)
            self.params_[f"b{name}"] = Tensor(wrng.uniform(-0.1, 0.1, fan_out), requires_grad=True)

    def frequencies(self) -> Tensor:
        p = self.params_
        x = Tensor(self.u_.reshape(-1, 1))
        x = ad.relu(ad.add(ad.matmul(x, p["W1"]), p["b1"]))
        x = ad.relu(ad.add(ad.matmul(x, p["W2"]), p["b2"]))
        x = ad.add(ad.matmul(x, p["W3"]), p["b3"])
        return ad.scale(ad.reshape(x, (int(self.d),)), self.omega_scale_)


class BochnerNonParam(_BochnerBase):
    """Free frequencies ``omega_tilde``.

    Initialised from ``omega`` when given, otherwise to ``1 / tau_i`` over the
    geometric period schedule spanning ``[tau_min, tau_max]`` (taken from the
    spans passed to ``fit`` when not set explicitly).
    """

    def __init__(
        self,
        d: int = 32,
        omega=None,
        tau_min: float | None = None,
        tau_max: float | None = None,
    ):
        self.d = d
        self.omega = omega
        self.tau_min = tau_min
        self.tau_max = tau_max

    def _init_params(self, X) -> None:
        if self.omega is not None:
            omega = np.asarray(self.omega, dtype=np.float64).reshape(-1)
            if omega.size != int(self.d):
                raise ConfigError(f"omega has {omega.size} entries, expected d={self.d}")
        else:
            omega = 1.0 / init_frequencies_geometric(*_tau_range(self, X), int(self.d))
        self.params_["omega_tilde"] = Tensor(omega, requires_grad=True)

    def frequencies(self) -> Tensor:
        return self.params_["omega_tilde"]


class MercerEmbedding(_TimeEmbedder):
    """Truncated Fourier features over ``k`` base frequencies.

    For base frequency ``w`` the block is
    ``[s0, s1 cos(pi w t), s2 sin(pi w t), ..., cos(jmax pi w t), sin(jmax pi w t)]``
    where the stored ``s`` are signed square roots of the Fourier coefficients
    (``c = s**2 >= 0``).  With ``intercept=False`` the constant column is
    dropped; with ``tied=True`` the cosine and sine of each harmonic share one
    coefficient, which makes the induced kernel exactly translation invariant.
    Frequencies are ``1 / tau`` over the geometric period schedule and stay
    fixed unless ``train_frequencies`` is set.
    """

    def __init__(
        self,
        k: int = 5,
        jmax: int = 8,
        tau_min: float | None = None,
        tau_max: float | None = None,
        omega=None,
        intercept: bool = True,
        tied: bool = False,
        train_frequencies: bool = False,
        coeff_init: float | None = None,
    ):
        self.k = k
        self.jmax = jmax
        self.tau_min = tau_min
        self.tau_max = tau_max
        self.omega = omega
        self.intercept = intercept
        self.tied = tied
        self.train_frequencies = train_frequencies
        self.coeff_init = coeff_init

    def _validate_hyperparams(self) -> None:
        if int(self.k) < 1 or int(self.jmax) < 1:
            raise ConfigError(f"k and jmax must be >= 1, got k={self.k}, jmax={self.jmax}")

    @property
    def block(self) -> int:
        return 2 * int(self.jmax) + int(bool(self.intercept))

    @property
    def dim(self) -> int:
        return int(self.k) * self.block

    def _init_params(self, X) -> None:
        k, jmax = int(self.k), int(self.jmax)
        if self.omega is not None:
            omega = np.asarray(self.omega, dtype=np.float64).reshape(-1)
            if omega.size != k:
                raise ConfigError(f"omega has {omega.size} entries, expected k={k}")
        else:
            omega = 1.0 / init_frequencies_geometric(*_tau_range(self, X), k)
        self.params_["omega"] = Tensor(omega, requires_grad=bool(self.train_frequencies))
        n_terms = jmax + int(bool(self.intercept))
        # default makes Phi(t).Phi(t) == 1 at initialisation
        s = self.coeff_init if self.coeff_init is not None else math.sqrt(1.0 / (k * n_terms))
        width = n_terms if self.tied else self.block
        self.params_["coeffs"] = Tensor(np.full((k, width), float(s)), requires_grad=True)

    def coefficients(self) -> np.ndarray:
        """Fourier coefficients ``c = s**2`` laid out like the feature blocks."""
        return self._expanded_coeffs().data ** 2

    def _expanded_coeffs(self) -> Tensor:
        s = self.params_["coeffs"]
        if not self.tied:
            return s
        k, jmax = int(self.k), int(self.jmax)
        if self.intercept:
            s0 = ad.index(s, (slice(None), slice(0, 1)))
            sh = ad.index(s, (slice(None), slice(1, None)))
            return ad.concat([s0, ad.stack_last([sh, sh])], axis=-1)
        return ad.stack_last([s, s]) if jmax else s

    def _features(self, t: Tensor) -> Tensor:
        k, jmax = int(self.k), int(self.jmax)
        harmonics = Tensor(math.pi * np.arange(1, jmax + 1).reshape(1, jmax))
        rate = ad.reshape(ad.mul(ad.reshape(self.params_["omega"], (k, 1)), harmonics), (k * jmax,))
        phase = ad.mul(ad.reshape(t, t.shape + (1,)), rate)
        phase = ad.reshape(phase, t.shape + (k, jmax))
        blocks = ad.stack_last([ad.cos(phase), ad.sin(phase)])
        if self.intercept:
            blocks = ad.concat([Tensor(np.ones(t.shape + (k, 1))), blocks], axis=-1)
        feats = ad.mul(blocks, self._expanded_coeffs())
        return ad.reshape(feats, t.shape + (self.dim,))


class PositionalEncoding(TransformerMixin, BaseEstimator):
    """Learned per-position vectors; ignores time values entirely."""

    def __init__(self, max_len: int = 8, d: int = 16, random_state: int = 0):
        self.max_len = max_len
        self.d = d
        self.random_state = random_state

    @property
    def dim(self) -> int:
        return int(self.d)

    def fit(self, X=None, y=None):
        rng = rng_stream(self.random_state, "embedding.posenc")
        self.params_ = {"table": Tensor(0.1 * rng.standard_normal((int(self.max_len), int(self.d))), requires_grad=True, name="table")}
        return self

    def parameters(self) -> list[Tensor]:
        check_is_fitted(self)
        return [self.params_["table"]]

    def embed_positions(self, positions) -> Tensor:
        check_is_fitted(self)
        return ad.gather_rows(self.params_["table"], positions)

    def embed(self, t) -> Tensor:
        """Position features for a 1-D or 2-D array laid out like ``t`` (values ignored)."""
        shape = np.shape(t)
        pos = np.broadcast_to(np.arange(shape[-1]) + int(self.max_len) - shape[-1], shape)
        return self.embed_positions(pos)

    def transform(self, X) -> np.ndarray:
        return self.embed(np.asarray(X, dtype=np.float64).reshape(-1)).data


EMBEDDER_NAMES = ("mercer", "bochner-normal", "bochner-invcdf", "bochner-nonparam", "posenc")


def make_embedder(name: str, **kw):
    """Construct an embedder from its CLI name; unknown keywords are rejected."""
    classes = {
        "mercer": MercerEmbedding,
        "bochner-normal": BochnerNormal,
        "bochner-invcdf": BochnerInvCdf,
        "bochner-nonparam": BochnerNonParam,
        "posenc": PositionalEncoding,
    }
    if name not in classes:
        raise ConfigError(f"unknown embedder {name!r}; choose from {', '.join(EMBEDDER_NAMES)}")
    cls = classes[name]
    allowed = set(cls().get_params())
    bad = set(kw) - allowed
    if bad:
        raise ConfigError(f"{name} does not accept {sorted(bad)}")
    return cls(**kw)


def kernel_estimate(embedder, t1, t2) -> Tensor:
    """``<Phi(t1), Phi(t2)>`` as a differentiable scalar (or array for array inputs)."""
    return embedder.kernel(t1, t2)


def export_phi_matrix(embedder, grid) -> np.ndarray:
    grid = check_grid(grid)
    return embedder.embed(grid).data.copy()


def export_gram(embedder, grid) -> np.ndarray:
    phi = export_phi_matrix(embedder, grid)
    return phi @ phi.T
