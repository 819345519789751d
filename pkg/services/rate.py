"""
Beamsim Rate Service
Sum rates, their Wirtinger gradients and Hessian-vector products, the MMSE
teacher, gradient-ascent refinement and its unrolled pullback

Shapes: H is (..., K, M, N), W is (..., N, K*M) with user block j in columns
j*M:(j+1)*M. All gradients follow the 2 * d/d(conj W) convention.
"""

import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Union

import numpy as np
import scipy.linalg

from services.errors import DegenerateChannelError, InvalidArgumentError, UnsupportedError
from services.numerics import ComplexArray, RealArray, WirtingerGradient, frobenius_sq, hermitian

LN2 = math.log(2.0)


@dataclass(frozen=True)
class Beamformer:
    """Overall precoding matrix W and its power budget"""
    W: ComplexArray
    power_budget: float

    @property
    def power(self) -> Union[float, RealArray]:
        value = frobenius_sq(self.W)
        return float(value) if np.ndim(value) == 0 else value

    def is_feasible(self, tol: float = 1e-9) -> bool:
        return bool(np.all(frobenius_sq(self.W) <= self.power_budget + tol))

    def block(self, k: int, M: int) -> ComplexArray:
        return self.W[..., k * M:(k + 1) * M]


@dataclass(frozen=True)
class RefinementTrace:
    """Iterates W_0..W_Q of gradient ascent"""
    iterates: List[ComplexArray]
    eta_ga: float
    projected: bool = False
    power_budget: Optional[float] = None

    @property
    def steps(self) -> int:
        return len(self.iterates) - 1

    @property
    def initial(self) -> ComplexArray:
        return self.iterates[0]

    @property
    def final(self) -> ComplexArray:
        return self.iterates[-1]


def _check_shapes(H: ComplexArray, W: ComplexArray) -> tuple[int, int, int]:
    if H.ndim < 3 or W.ndim < 2:
        raise InvalidArgumentError(f"expected H (..., K, M, N) and W (..., N, KM), got {H.shape} and {W.shape}")
    K, M, N = H.shape[-3:]
    if W.shape[-2] != N or W.shape[-1] != K * M:
        raise InvalidArgumentError(f"W shape {W.shape[-2:]} does not match (N, KM) = ({N}, {K * M})")
    try:
        np.broadcast_shapes(H.shape[:-3], W.shape[:-2])
    except ValueError:
        raise InvalidArgumentError(f"batch shapes {H.shape[:-3]} and {W.shape[:-2]} do not broadcast") from None
    return K, M, N


def _user_products(H: ComplexArray, W: ComplexArray, K: int, M: int) -> ComplexArray:
    """P[..., k, i] = H_k W_i, shape (..., K, K, M, M)"""
    blocks = W.reshape(*W.shape[:-1], K, M)
    return np.einsum("...kan,...nic->...kiac", H, blocks)


def _scalar_or_array(value: np.ndarray) -> Union[float, RealArray]:
    return float(value) if np.ndim(value) == 0 else value


@dataclass
class _RateTerms:
    """Covariances and inverses shared by the rate, gradient and HVP"""
    HW: ComplexArray
    T: ComplexArray
    S: ComplexArray
    K: int
    M: int
    _Tinv: Optional[ComplexArray] = field(default=None, repr=False)
    _Sinv: Optional[ComplexArray] = field(default=None, repr=False)

    @classmethod
    def build(cls, H: ComplexArray, W: ComplexArray) -> "_RateTerms":
        K, M, _ = _check_shapes(H, W)
        HW = _user_products(H, W, K, M)
        cov = np.einsum("...kiac,...kibc->...kiab", HW, np.conj(HW))
        idx = np.arange(K)
        eye = np.eye(M, dtype=np.complex128)
        T = eye + cov.sum(axis=-3)
        S = T - cov[..., idx, idx, :, :]
        return cls(HW=HW, T=T, S=S, K=K, M=M)

    @property
    def Tinv(self) -> ComplexArray:
        if self._Tinv is None:
            self._Tinv = np.linalg.inv(self.T)
        return self._Tinv

    @property
    def Sinv(self) -> ComplexArray:
        if self._Sinv is None:
            self._Sinv = np.linalg.inv(self.S)
        return self._Sinv

    @property
    def diagonal(self) -> ComplexArray:
        idx = np.arange(self.K)
        return self.HW[..., idx, idx, :, :]

    def per_user(self) -> RealArray:
        _, logdet_T = np.linalg.slogdet(self.T)
        _, logdet_S = np.linalg.slogdet(self.S)
        return (logdet_T - logdet_S) / LN2


def _back_project(H: ComplexArray, X: ComplexArray, Y: ComplexArray) -> ComplexArray:
    """sum_k H_k^H X[k, j] + H_j^H Y[j], reshaped to (..., N, K*M)"""
    HH = np.conj(H)
    G = np.einsum("...kan,...kjac->...njc", HH, X) + np.einsum("...jan,...jac->...njc", HH, Y)
    return G.reshape(*G.shape[:-2], G.shape[-2] * G.shape[-1])


def sum_rate_miso(H: ComplexArray, W: ComplexArray) -> Union[float, RealArray]:
    """sum_k log2(1 + |h_k^H w_k|^2 / (1 + sum_{i!=k} |h_k^H w_i|^2)) for single-antenna users"""
    K, M, _ = _check_shapes(H, W)
    if M != 1:
        raise InvalidArgumentError(f"sum_rate_miso needs M = 1, got M = {M}")
    gains = np.abs(np.einsum("...kn,...ni->...ki", H[..., 0, :], W)) ** 2
    idx = np.arange(K)
    total = 1.0 + gains.sum(axis=-1)
    interference = total - gains[..., idx, idx]
    return _scalar_or_array(np.sum(np.log2(total) - np.log2(interference), axis=-1))


def sum_rate_mimo(H: ComplexArray, W: ComplexArray) -> Union[float, RealArray]:
    """sum_k log2 det(I + Sigma_k^-1 H_k W_k W_k^H H_k^H), Sigma_k the interference-plus-noise covariance"""
    terms = _RateTerms.build(H, W)
    return _scalar_or_array(terms.per_user().sum(axis=-1))


def sum_rate(H: ComplexArray, W: ComplexArray) -> Union[float, RealArray]:
    """Sum rate in bits/s/Hz, batched over leading axes"""
    if H.ndim >= 3 and H.shape[-2] == 1:
        return sum_rate_miso(H, W)
    return sum_rate_mimo(H, W)


def per_user_rates(H: ComplexArray, W: ComplexArray) -> RealArray:
    """Per-user rate breakdown, shape (..., K)"""
    return _RateTerms.build(H, W).per_user()


def _grad(terms: _RateTerms, H: ComplexArray) -> ComplexArray:
    D = terms.Tinv - terms.Sinv
    X = np.einsum("...kab,...kjbc->...kjac", D, terms.HW)
    Y = terms.Sinv @ terms.diagonal
    return (2.0 / LN2) * _back_project(H, X, Y)


def grad_sum_rate(H: ComplexArray, W: ComplexArray) -> WirtingerGradient:
    """Analytical gradient of the sum rate with respect to W

    G_j = (2/ln2) [ sum_k H_k^H (T_k^-1 - S_k^-1) H_k W_j + H_j^H S_j^-1 H_j W_j ]
    with T_k = I + sum_i H_k W_i W_i^H H_k^H and S_k = T_k - H_k W_k W_k^H H_k^H.
    """
    return WirtingerGradient(_grad(_RateTerms.build(H, W), H))


def rate_and_grad(H: ComplexArray, W: ComplexArray) -> tuple[Union[float, RealArray], ComplexArray]:
    """Sum rate and its gradient from one set of covariances"""
    terms = _RateTerms.build(H, W)
    return _scalar_or_array(terms.per_user().sum(axis=-1)), _grad(terms, H)


def sum_rate_hvp(H: ComplexArray, W: ComplexArray, V: ComplexArray) -> ComplexArray:
    """Directional derivative of grad_sum_rate at W along V

    Equals the real Hessian of the sum rate applied to V, in the same complex
    packing as the gradient.
    """
    terms = _RateTerms.build(H, W)
    if V.shape[-2:] != W.shape[-2:]:
        raise InvalidArgumentError(f"direction shape {V.shape} does not match W {W.shape}")
    K, M = terms.K, terms.M
    HV = _user_products(H, V, K, M)
    E = np.einsum("...kiac,...kibc->...kiab", HV, np.conj(terms.HW))
    dcov = E + hermitian(E)
    idx = np.arange(K)
    dT = dcov.sum(axis=-3)
    dS = dT - dcov[..., idx, idx, :, :]
    Tinv, Sinv = terms.Tinv, terms.Sinv
    dTinv = -Tinv @ dT @ Tinv
    dSinv = -Sinv @ dS @ Sinv

    D = Tinv - Sinv
    dD = dTinv - dSinv
    X = np.einsum("...kab,...kjbc->...kjac", dD, terms.HW) + np.einsum("...kab,...kjbc->...kjac", D, HV)
    Y = dSinv @ terms.diagonal + Sinv @ HV[..., idx, idx, :, :]
    return (2.0 / LN2) * _back_project(H, X, Y)


def mmse_beamformer(H: ComplexArray, P: float) -> ComplexArray:
    """Regularised matched filter W_k = sqrt(P/K) M H_k^H / ||M H_k^H||_F

    M = (I_N + (P/K) sum_i H_i^H H_i)^-1. Total power is exactly P.
    """
    if P <= 0:
        raise InvalidArgumentError(f"power budget must be positive, got {P}")
    if H.ndim < 3:
        raise InvalidArgumentError(f"expected H (..., K, M, N), got {H.shape}")
    K, M, N = H.shape[-3:]
    flat = H.reshape(-1, K * M, N)
    out = np.empty((flat.shape[0], N, K * M), dtype=np.complex128)
    eye = np.eye(N, dtype=np.complex128)
    for b, stacked in enumerate(flat):
        rhs = stacked.conj().T
        A = eye + (P / K) * (rhs @ stacked)
        X = scipy.linalg.solve(A, rhs, assume_a="pos").reshape(N, K, M)
        norms = np.sqrt(np.sum(np.abs(X) ** 2, axis=(0, 2)))
        if np.any(norms == 0):
            raise DegenerateChannelError(f"zero channel for user(s) {np.flatnonzero(norms == 0).tolist()}")
        out[b] = (math.sqrt(P / K) * X / norms[None, :, None]).reshape(N, K * M)
    return out.reshape(*H.shape[:-3], N, K * M)


def project_power(W: ComplexArray, P: float) -> ComplexArray:
    """Rescale each matrix so that ||W||_F^2 <= P"""
    power = frobenius_sq(W)
    scale = np.minimum(1.0, np.sqrt(P / np.maximum(power, np.finfo(float).tiny)))
    return W * np.asarray(scale)[..., None, None]


def refine(
    W0: ComplexArray,
    H_used: ComplexArray,
    eta_ga: float,
    Q: int,
    project: bool = False,
    P: Optional[float] = None,
) -> RefinementTrace:
    """Q steps of W_q = W_{q-1} + eta_ga * grad R(H_used, W_{q-1})"""
    if Q < 0 or eta_ga < 0:
        raise InvalidArgumentError(f"need Q >= 0 and eta_ga >= 0, got Q={Q}, eta_ga={eta_ga}")
    if project and P is None:
        raise InvalidArgumentError("projection needs the power budget P")
    iterates = [W0]
    W = W0
    for _ in range(Q):
        W = W + eta_ga * _grad(_RateTerms.build(H_used, W), H_used)
        if project:
            W = project_power(W, P)
        iterates.append(W)
    return RefinementTrace(iterates=iterates, eta_ga=eta_ga, projected=project, power_budget=P)


def unrolled_jacobian_blocks(H: ComplexArray, trace: RefinementTrace) -> List[ComplexArray]:
    """Dense Wirtinger Jacobians of each refinement step, for small unbatched instances

    Block q maps (w_{q-1}, conj w_{q-1}) to (w_q, conj w_q):
    [[dw_q/dw, dw_q/dconj(w)], [conj(dw_q/dconj(w)), conj(dw_q/dw)]].
    """
    if H.ndim != 3:
        raise InvalidArgumentError("dense Jacobian blocks are built for a single instance only")
    blocks = []
    for W in trace.iterates[:-1]:
        n = W.size
        A = np.eye(n, dtype=np.complex128)
        B = np.zeros((n, n), dtype=np.complex128)
        for b in range(n):
            e = np.zeros(n, dtype=np.complex128)
            e[b] = 1.0
            e = e.reshape(W.shape)
            d_re = sum_rate_hvp(H, W, e).reshape(-1)
            d_im = sum_rate_hvp(H, W, 1j * e).reshape(-1)
            A[:, b] += trace.eta_ga * 0.5 * (d_re - 1j * d_im)
            B[:, b] = trace.eta_ga * 0.5 * (d_re + 1j * d_im)
        blocks.append(np.block([[A, B], [np.conj(B), np.conj(A)]]))
    return blocks


def unrolled_pullback(
    H: ComplexArray,
    trace: RefinementTrace,
    grad_at_WQ: Union[WirtingerGradient, ComplexArray],
    method: Literal["reverse", "dense"] = "reverse",
) -> WirtingerGradient:
    """Pull a gradient at W_Q back to W_0 through the unrolled refinement

    "reverse" accumulates G_{q-1} = G_q + eta * HVP(W_{q-1}, G_q), using the
    symmetry of the real Hessian. "dense" multiplies the Wirtinger Jacobian
    blocks of unrolled_jacobian_blocks.
    """
    if trace.projected:
        raise UnsupportedError("pullback through the power projection is not supported")
    G = grad_at_WQ.grad if isinstance(grad_at_WQ, WirtingerGradient) else np.asarray(grad_at_WQ)
    if G.shape[-2:] != trace.final.shape[-2:]:
        raise InvalidArgumentError(f"gradient shape {G.shape} does not match W {trace.final.shape}")

    if method == "reverse":
        for W in reversed(trace.iterates[:-1]):
            G = G + trace.eta_ga * sum_rate_hvp(H, W, G)
        return WirtingerGradient(G)

    if method != "dense":
        raise InvalidArgumentError(f"unknown pullback method {method!r}")
    n = G.size
    row = np.concatenate([np.conj(G).reshape(-1), G.reshape(-1)]) / 2.0
    for block in reversed(unrolled_jacobian_blocks(H, trace)):
        row = row @ block
    return WirtingerGradient((2.0 * row[n:]).reshape(G.shape))
