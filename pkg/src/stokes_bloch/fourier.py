"""Periodic grids, Fourier fields and shifted differential operators on the unit torus.

Conventions
-----------
Fields on Y = (0, 1)^d are expanded as ``f(y) = sum_k fhat(k) exp(2 pi i k.y)``
with ``fhat = fftn(f) / n**d``.  Coefficient arrays are stored in FFT order
(``numpy.fft.fftfreq`` layout) with the component axes first, e.g. a vector
field has coefficient shape ``(d, n, ..., n)`` and a matrix field
``(d, d, n, ..., n)``.

Gradients are stored with the derivative index first:
``(D(theta) v)[k, l] = d v_l / d y_k + i theta_k v_l``, and the divergence of a
matrix field contracts that first index.  The shift ``theta`` adds to the
wavevector ``2 pi k`` directly.

Coefficient products ``mu * F`` are formed on a padded grid of ``3n/2`` points
per axis and truncated back, which is exact for the trigonometric interpolant of
``mu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

__all__ = [
    "CellGrid",
    "Field",
    "ScalarField",
    "VectorField",
    "MatrixField",
    "ViscosityModel",
    "ViscosityField",
    "EllipticityError",
    "ShiftParameter",
    "make_grid",
    "sample_viscosity",
    "shifted_gradient",
    "shifted_sym_gradient",
    "shifted_divergence",
    "coeff_multiply",
    "padded_size",
]


class EllipticityError(ValueError):
    """Raised when a viscosity violates mu(y) >= mu0 > 0."""


def padded_size(n: int) -> int:
    """Size of the dealiasing grid (3/2 rule)."""
    return (3 * n + 1) // 2


@dataclass(frozen=True)
class CellGrid:
    """Uniform grid on the unit torus with ``n`` nodes per axis."""

    d: int
    n: int

    def __post_init__(self):
        if self.d not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.d}")
        if self.n % 2:
            raise ValueError(f"resolution must be even, got {self.n}")
        if self.n < 4:
            raise ValueError(f"resolution must be >= 4, got {self.n}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def size(self) -> int:
        return self.n**self.d

    @cached_property
    def freqs(self) -> np.ndarray:
        """Integer wavenumbers along one axis, FFT order (-n/2 .. n/2-1)."""
        return np.rint(np.fft.fftfreq(self.n, 1.0 / self.n)).astype(int)

    @cached_property
    def modes(self) -> np.ndarray:
        """Integer mode vectors, shape ``(d, n, ..., n)``."""
        return np.stack(np.meshgrid(*([self.freqs] * self.d), indexing="ij"))

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates y_j = j/n, shape ``(d, n, ..., n)``."""
        axis = np.arange(self.n) / self.n
        return np.stack(np.meshgrid(*([axis] * self.d), indexing="ij"))

    @cached_property
    def nyquist_mask(self) -> np.ndarray:
        """True at modes with some component equal to -n/2."""
        return np.any(self.modes == -self.n // 2, axis=0)

    def wavevectors(self, theta=None) -> np.ndarray:
        """``2 pi k + theta`` for every mode, shape ``(d, n, ..., n)``."""
        g = 2.0 * np.pi * self.modes.astype(float)
        if theta is not None:
            theta = np.asarray(theta, dtype=float)
            g = g + theta.reshape((self.d,) + (1,) * self.d)
        return g

    def flat_index(self, mode_vectors: np.ndarray) -> np.ndarray:
        """Flat FFT-order index of integer mode vectors of shape ``(..., d)``."""
        m = np.mod(np.asarray(mode_vectors), self.n)
        return np.ravel_multi_index(tuple(np.moveaxis(m, -1, 0)), self.shape)

    def pad_index(self, m: int) -> np.ndarray:
        """Positions of this grid's modes inside an ``m``-point FFT axis."""
        return np.mod(self.freqs, m)


def make_grid(d: int, n: int) -> CellGrid:
    return CellGrid(d, n)


def _to_padded(coeffs: np.ndarray, grid: CellGrid, m: int, split_nyquist=False) -> np.ndarray:
    """Zero-pad FFT-order coefficients from ``n`` to ``m`` modes per axis."""
    d, n = grid.d, grid.n
    lead = coeffs.shape[: coeffs.ndim - d]
    out = np.zeros(lead + (m,) * d, dtype=complex)
    idx = grid.pad_index(m)
    out[(Ellipsis,) + np.ix_(*([idx] * d))] = coeffs
    if split_nyquist:
        # mode -n/2 is shared equally with +n/2 so a real interpolant stays real
        for ax in range(d):
            axis = out.ndim - d + ax
            src = [slice(None)] * out.ndim
            dst = [slice(None)] * out.ndim
            src[axis] = (-n // 2) % m
            dst[axis] = n // 2
            half = 0.5 * out[tuple(src)]
            out[tuple(src)] = half
            out[tuple(dst)] = half
    return out


def _from_padded(big: np.ndarray, grid: CellGrid, m: int) -> np.ndarray:
    idx = grid.pad_index(m)
    return big[(Ellipsis,) + np.ix_(*([idx] * grid.d))]


def _axes(d):
    return tuple(range(-d, 0))


def to_nodal(coeffs: np.ndarray, d: int) -> np.ndarray:
    shape = coeffs.shape[-d:]
    return sfft.ifftn(coeffs, axes=_axes(d)) * np.prod(shape)


def to_coeffs(values: np.ndarray, d: int) -> np.ndarray:
    shape = values.shape[-d:]
    return sfft.fftn(values, axes=_axes(d)) / np.prod(shape)


@dataclass(frozen=True, eq=False)
class Field:
    """A field on the torus held by its Fourier coefficients.

    ``coeffs`` has shape ``rank_shape + grid.shape`` and is made read-only on
    construction.  ``real`` records that the nodal values are real, which is
    equivalent to conjugate-symmetric coefficients.
    """

    grid: CellGrid
    coeffs: np.ndarray
    real: bool = False

    rank: int = field(default=-1, init=False, repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=complex)
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)
        expected = self.component_shape() + self.grid.shape
        if c.shape != expected:
            raise ValueError(f"coefficient shape {c.shape} does not match {expected}")

    def component_shape(self) -> tuple[int, ...]:
        if self.rank < 0:
            return self.coeffs.shape[: np.ndim(self.coeffs) - self.grid.d]
        return (self.grid.d,) * self.rank

    @classmethod
    def from_nodal(cls, grid: CellGrid, values, real: bool | None = None):
        values = np.asarray(values)
        if real is None:
            real = not np.iscomplexobj(values)
        return cls(grid, to_coeffs(values.astype(complex), grid.d), real=real)

    @classmethod
    def zeros(cls, grid: CellGrid):
        return cls(grid, np.zeros(cls._zero_shape(grid) + grid.shape), real=True)

    @classmethod
    def _zero_shape(cls, grid):
        return ()

    @cached_property
    def nodal(self) -> np.ndarray:
        v = to_nodal(self.coeffs, self.grid.d)
        if self.real:
            v = v.real.astype(complex)
        v.flags.writeable = False
        return v

    @property
    def mean(self):
        return self.coeffs[(Ellipsis,) + (0,) * self.grid.d]

    def norm(self) -> float:
        """L2 norm on the unit torus (Parseval)."""
        return float(np.sqrt(np.sum(np.abs(self.coeffs) ** 2)))

    def inner(self, other: "Field") -> complex:
        """<self, other> = integral of self . conj(other)."""
        return complex(np.sum(self.coeffs * np.conj(other.coeffs)))

    def with_coeffs(self, coeffs, real=None):
        return type(self)(self.grid, coeffs, real=self.real if real is None else real)

    def mean_zero(self):
        c = np.array(self.coeffs)
        c[(Ellipsis,) + (0,) * self.grid.d] = 0
        return self.with_coeffs(c)

    def __add__(self, other):
        return self.with_coeffs(self.coeffs + other.coeffs, real=self.real and other.real)

    def __sub__(self, other):
        return self.with_coeffs(self.coeffs - other.coeffs, real=self.real and other.real)

    def __mul__(self, s):
        s = complex(s)
        return self.with_coeffs(self.coeffs * s, real=self.real and s.imag == 0)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class ScalarField(Field):
    rank: int = field(default=0, init=False, repr=False)


@dataclass(frozen=True, eq=False)
class VectorField(Field):
    rank: int = field(default=1, init=False, repr=False)

    @classmethod
    def _zero_shape(cls, grid):
        return (grid.d,)

    @classmethod
    def constant(cls, grid: CellGrid, c):
        coeffs = np.zeros((grid.d,) + grid.shape, dtype=complex)
        coeffs[(slice(None),) + (0,) * grid.d] = c
        return cls(grid, coeffs, real=not np.iscomplexobj(c))


@dataclass(frozen=True, eq=False)
class MatrixField(Field):
    rank: int = field(default=2, init=False, repr=False)

    @classmethod
    def _zero_shape(cls, grid):
        return (grid.d, grid.d)


_FIELD_BY_RANK = {0: ScalarField, 1: VectorField, 2: MatrixField}


@dataclass(frozen=True)
class ShiftParameter:
    """Direction ``eta_hat`` (unit vector) and magnitude ``delta >= 0``."""

    direction: tuple[float, ...]
    delta: float = 0.0

    def __post_init__(self):
        e = np.asarray(self.direction, dtype=float)
        if abs(np.linalg.norm(e) - 1.0) > 1e-14:
            raise ValueError("direction must be a unit vector")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        object.__setattr__(self, "direction", tuple(float(x) for x in e))

    @property
    def theta(self) -> np.ndarray:
        return self.delta * np.asarray(self.direction)


def _check_same_grid(a: Field, b: Field):
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")


def shifted_gradient(v: Field, theta=None) -> Field:
    """``D(theta) v``; a scalar gives a vector field, a vector gives a matrix field."""
    g = v.grid.wavevectors(theta)
    if v.rank == 0:
        return VectorField(v.grid, 1j * g * v.coeffs)
    if v.rank != 1:
        raise ValueError("shifted_gradient takes a scalar or vector field")
    c = 1j * g[:, None] * v.coeffs[None, :]
    real = v.real and (theta is None or not np.any(theta))
    return MatrixField(v.grid, c, real=real)


def shifted_sym_gradient(v: VectorField, theta=None) -> MatrixField:
    """Symmetric part ``E(theta) v = (G + G^t) / 2`` of the shifted gradient."""
    G = shifted_gradient(v, theta)
    c = 0.5 * (G.coeffs + np.swapaxes(G.coeffs, 0, 1))
    return MatrixField(v.grid, c, real=G.real)


def shifted_divergence(v: Field, theta=None) -> Field:
    """``D(theta) . v``: vector -> scalar, matrix -> vector (first index contracted)."""
    g = v.grid.wavevectors(theta)
    real = v.real and (theta is None or not np.any(theta))
    if v.rank == 1:
        return ScalarField(v.grid, np.sum(1j * g * v.coeffs, axis=0), real=real)
    if v.rank == 2:
        return VectorField(v.grid, np.sum(1j * g[:, None] * v.coeffs, axis=0), real=real)
    raise ValueError("shifted_divergence takes a vector or matrix field")


def coeff_multiply(mu: ScalarField, F: Field) -> Field:
    """Dealiased product ``mu * F`` truncated back to the grid's modes."""
    _check_same_grid(mu, F)
    grid = F.grid
    m = padded_size(grid.n)
    mu_big = _padded_nodal(mu)
    big = _to_padded(F.coeffs, grid, m)
    prod = to_coeffs(to_nodal(big, grid.d) * mu_big, grid.d)
    out = _from_padded(prod, grid, m)
    return type(F)(grid, out, real=F.real and mu.real)


def _padded_nodal(mu: ScalarField) -> np.ndarray:
    # cached per field instance; fields are immutable
    cache = mu.__dict__.get("_padded")
    if cache is None:
        m = padded_size(mu.grid.n)
        big = _to_padded(mu.coeffs, mu.grid, m, split_nyquist=True)
        cache = to_nodal(big, mu.grid.d)
        if mu.real:
            cache = cache.real
        mu.__dict__["_padded"] = cache
    return cache


# --------------------------------------------------------------------------
# viscosity
# --------------------------------------------------------------------------

_VARIANTS = ("constant", "layered_cosine", "product_cosine", "tabulated")


@dataclass(frozen=True)
class ViscosityModel:
    """Periodic viscosity ``mu(y)``.

    Variants and their parameters:

    * ``constant``: ``value``
    * ``layered_cosine``: ``mean + amplitude * cos(2 pi frequency y[axis])``
    * ``product_cosine``: ``mean * prod_j (1 + amplitudes[j] cos(2 pi y_j))``
    * ``tabulated``: nodal ``samples`` on an ``n^d`` grid, Fourier-interpolated

    ``floor`` is the ellipticity constant mu0; it defaults to the analytic
    minimum (sampled minimum for tabulated data).
    """

    variant: str
    value: float = 1.0
    mean: float = 1.0
    amplitude: float = 0.0
    axis: int = 0
    frequency: int = 1
    amplitudes: tuple[float, ...] = ()
    samples: np.ndarray | None = field(default=None, compare=False, repr=False)
    floor: float | None = None

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown viscosity variant {self.variant!r}")
        object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        if self.variant == "tabulated" and self.samples is None:
            raise ValueError("tabulated viscosity needs samples")

    @classmethod
    def constant(cls, value: float):
        return cls("constant", value=value)

    @classmethod
    def layered_cosine(cls, mean=1.0, amplitude=0.5, axis=0, frequency=1):
        return cls("layered_cosine", mean=mean, amplitude=amplitude, axis=axis, frequency=frequency)

    @classmethod
    def product_cosine(cls, mean=1.0, amplitudes=(0.3, 0.3)):
        return cls("product_cosine", mean=mean, amplitudes=tuple(amplitudes))

    @classmethod
    def tabulated(cls, samples, floor=None):
        s = np.array(samples, dtype=float)
        s.flags.writeable = False
        return cls("tabulated", samples=s, floor=floor)

    def lower_bound(self) -> float:
        """Analytic minimum of mu (sampled minimum for tabulated data)."""
        if self.variant == "constant":
            return self.value
        if self.variant == "layered_cosine":
            return self.mean - abs(self.amplitude)
        if self.variant == "product_cosine":
            return self.mean * float(np.prod([1 - abs(a) for a in self.amplitudes]))
        return float(np.min(self.samples))

    @property
    def mu0(self) -> float:
        return self.lower_bound() if self.floor is None else self.floor

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        """Evaluate at points ``y`` of shape ``(d, ...)`` (analytic variants)."""
        y = np.asarray(y, dtype=float)
        if self.variant == "constant":
            return np.full(y.shape[1:], float(self.value))
        if self.variant == "layered_cosine":
            return self.mean + self.amplitude * np.cos(2 * np.pi * self.frequency * y[self.axis])
        if self.variant == "product_cosine":
            if len(self.amplitudes) != y.shape[0]:
                raise ValueError("product_cosine needs one amplitude per axis")
            out = np.full(y.shape[1:], float(self.mean))
            for j, a in enumerate(self.amplitudes):
                out = out * (1 + a * np.cos(2 * np.pi * y[j]))
            return out
        raise ValueError("tabulated viscosity has no closed form; use sample_viscosity")

    def to_dict(self) -> dict:
        out = {"variant": self.variant}
        if self.variant == "constant":
            out["value"] = self.value
        elif self.variant == "layered_cosine":
            out.update(mean=self.mean, amplitude=self.amplitude, axis=self.axis, frequency=self.frequency)
        elif self.variant == "product_cosine":
            out.update(mean=self.mean, amplitudes=list(self.amplitudes))
        else:
            out["samples_shape"] = list(self.samples.shape)
        if self.floor is not None:
            out["floor"] = self.floor
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ViscosityModel":
        data = dict(data)
        variant = data.pop("variant")
        if variant == "tabulated":
            return cls.tabulated(data["samples"], floor=data.get("floor"))
        if "amplitudes" in data:
            data["amplitudes"] = tuple(data["amplitudes"])
        return cls(variant, **data)


@dataclass(frozen=True, eq=False)
class ViscosityField(ScalarField):
    """Sampled viscosity with its ellipticity data."""

    model: ViscosityModel | None = None
    mu_min: float = 0.0
    mu_max: float = 0.0

    @property
    def mu0(self) -> float:
        return self.model.mu0 if self.model is not None else self.mu_min

    @property
    def mean_value(self) -> float:
        return float(self.mean.real)

    def with_coeffs(self, coeffs, real=None):
        return ScalarField(self.grid, coeffs, real=self.real if real is None else real)


def sample_viscosity(model: ViscosityModel, grid: CellGrid, scale: int = 1) -> ViscosityField:
    """Sample ``mu`` on the grid nodes.

    ``scale`` evaluates ``mu(scale * y)``, i.e. the ``1/scale``-periodic
    rescaling used for oscillating coefficients.
    """
    if model.variant == "tabulated":
        s = np.asarray(model.samples, dtype=float)
        if s.ndim != grid.d:
            raise ValueError("tabulated samples have the wrong dimension")
        if scale != 1:
            s = np.tile(s, (scale,) * grid.d)
        if s.shape != grid.shape:
            small = CellGrid(grid.d, s.shape[0])
            c = to_coeffs(s.astype(complex), grid.d)
            if s.shape[0] < grid.n:
                big = _to_padded(c, small, grid.n, split_nyquist=True)
                values = to_nodal(big, grid.d).real
            else:
                values = to_nodal(_from_padded(c, grid, s.shape[0]), grid.d).real
        else:
            values = s
    else:
        values = model.evaluate(scale * grid.nodes)
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if lo <= 0:
        raise EllipticityError(f"ellipticity violated: min mu = {lo:g} <= 0")
    if model.floor is not None and lo < model.floor * (1 - 1e-12):
        raise EllipticityError(f"min mu = {lo:g} below the floor mu0 = {model.floor:g}")
    coeffs = to_coeffs(values.astype(complex), grid.d)
    return ViscosityField(grid, coeffs, real=True, model=model, mu_min=lo, mu_max=hi)
