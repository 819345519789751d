"""
Beamsim Numerics Service
Complex linear algebra helpers, ULA array responses, Wirtinger gradient
conventions and finite-difference oracles

Gradient convention used everywhere: for a real objective f of a complex
array W the gradient is 2 * df/d(conj W), i.e. df/dRe(W) + j df/dIm(W).
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np
import numpy.typing as npt

from services.errors import InvalidArgumentError, NumericFailureError

ComplexArray = npt.NDArray[np.complex128]
RealArray = npt.NDArray[np.float64]

WIRTINGER_CONVENTION = "two-times-conjugate-derivative"
DEFAULT_FD_STEP = 1e-5


@dataclass(frozen=True)
class WirtingerGradient:
    """Gradient of a real objective with respect to a complex array"""

    grad: ComplexArray
    convention: str = WIRTINGER_CONVENTION

    @property
    def shape(self) -> tuple[int, ...]:
        return self.grad.shape

    def conjugate_derivative(self) -> ComplexArray:
        """df/d(conj w) entrywise"""
        return self.grad / 2.0


def ensure_finite(x: npt.ArrayLike, what: str) -> None:
    """Raise NumericFailureError if x contains NaN or Inf"""
    if not np.all(np.isfinite(x)):
        raise NumericFailureError(f"non-finite values in {what}")


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream"""
    return np.random.default_rng(seed)


def derive_seeds(seed: int, count: int) -> list[np.random.SeedSequence]:
    """Independent child seeds, one per sample or chunk"""
    return np.random.SeedSequence(seed).spawn(count)


def complex_gaussian(rng: np.random.Generator, shape: tuple[int, ...], variance: float = 1.0) -> ComplexArray:
    """Draw CN(0, variance) entries (real and imaginary parts each N(0, variance/2))"""
    if variance < 0:
        raise InvalidArgumentError(f"variance must be nonnegative, got {variance}")
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def array_response(n: int, theta: npt.ArrayLike, d_over_lambda: float = 0.5) -> ComplexArray:
    """ULA steering vector(s) with unit norm

    Entry q (0-based) is exp(j 2 pi d/lambda q sin(theta)) / sqrt(n). A scalar
    theta gives an (n, 1) column; an array of angles of shape S gives the
    vectors stacked as shape S + (n,).
    """
    if n < 1:
        raise InvalidArgumentError(f"antenna count must be >= 1, got {n}")
    if d_over_lambda <= 0:
        raise InvalidArgumentError(f"d_over_lambda must be positive, got {d_over_lambda}")
    theta = np.asarray(theta, dtype=np.float64)
    q = np.arange(n)
    phase = 2.0 * np.pi * d_over_lambda * np.multiply.outer(np.sin(theta), q)
    vectors = np.exp(1j * phase) / np.sqrt(n)
    if theta.ndim == 0:
        return vectors.reshape(n, 1)
    return vectors


def steering_matrix(n: int, angles: npt.ArrayLike, d_over_lambda: float = 0.5) -> ComplexArray:
    """Columns are array responses at the given angles, shape (..., n, len(angles))"""
    vectors = array_response(n, np.atleast_1d(angles), d_over_lambda)
    return np.swapaxes(vectors, -1, -2)


def vec(x: ComplexArray) -> ComplexArray:
    """Column-major vectorisation over the last two axes"""
    return np.swapaxes(x, -1, -2).reshape(*x.shape[:-2], x.shape[-1] * x.shape[-2])


def unvec(v: ComplexArray, rows: int, cols: int) -> ComplexArray:
    """Inverse of vec: reshape a length rows*cols vector into rows x cols (column-major)"""
    return np.swapaxes(v.reshape(*v.shape[:-1], cols, rows), -1, -2)


def realify(x: ComplexArray) -> RealArray:
    """[vec Re x; vec Im x] over the last two axes"""
    v = vec(x)
    return np.concatenate([v.real, v.imag], axis=-1)


def derealify(v: RealArray, rows: int, cols: int) -> ComplexArray:
    """Inverse of realify"""
    half = rows * cols
    if v.shape[-1] != 2 * half:
        raise InvalidArgumentError(f"expected trailing length {2 * half}, got {v.shape[-1]}")
    return unvec(v[..., :half], rows, cols) + 1j * unvec(v[..., half:], rows, cols)


def hermitian(x: ComplexArray) -> ComplexArray:
    """Conjugate transpose over the last two axes"""
    return np.conj(np.swapaxes(x, -1, -2))


def frobenius_sq(x: ComplexArray, axes: tuple[int, int] = (-2, -1)) -> RealArray:
    """Squared Frobenius norm over the given axes"""
    return np.sum(np.abs(x) ** 2, axis=axes)


def inner_real(a: ComplexArray, b: ComplexArray) -> float:
    """Re<a, b> = sum Re(conj(a) * b), the real inner product of complex arrays"""
    return float(np.sum((np.conj(a) * b).real))


def relative_error(estimate: npt.ArrayLike, reference: npt.ArrayLike) -> float:
    """||estimate - reference|| / max(||reference||, tiny)"""
    estimate = np.asarray(estimate)
    reference = np.asarray(reference)
    scale = max(float(np.linalg.norm(reference)), 1e-300)
    return float(np.linalg.norm(estimate - reference)) / scale


def wirtinger_fd_oracle(
    f: Callable[[ComplexArray], float],
    w: ComplexArray,
    h: float = DEFAULT_FD_STEP,
) -> WirtingerGradient:
    """Central-difference estimate of 2 * df/d(conj w)

    Each entry is perturbed independently along the real and imaginary axes.
    """
    if h <= 0:
        raise InvalidArgumentError(f"finite-difference step must be positive, got {h}")
    w = np.asarray(w, dtype=np.complex128)
    grad = np.zeros_like(w)
    flat = grad.reshape(-1)
    for a in range(w.size):
        e = np.zeros(w.size, dtype=np.complex128)
        e[a] = h
        e = e.reshape(w.shape)
        values = (f(w + e), f(w - e), f(w + 1j * e), f(w - 1j * e))
        if not np.all(np.isfinite(values)):
            raise NumericFailureError(f"objective is not finite near entry {a}")
        flat[a] = (values[0] - values[1]) / (2 * h) + 1j * (values[2] - values[3]) / (2 * h)
    return WirtingerGradient(grad)


def real_fd_gradient(
    f: Callable[[RealArray], float],
    x: RealArray,
    h: float = DEFAULT_FD_STEP,
) -> RealArray:
    """Central-difference gradient of a real function of a real array"""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for a in range(flat_x.size):
        original = flat_x[a]
        flat_x[a] = original + h
        up = f(x)
        flat_x[a] = original - h
        down = f(x)
        flat_x[a] = original
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericFailureError(f"objective is not finite near entry {a}")
        flat_g[a] = (up - down) / (2 * h)
    return grad
