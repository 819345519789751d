"""
Beamsim Feedback Service
Latent quantization, feedback errors and per-user bitstream frames
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from models.experiment import FeedbackChannelModel
from services.errors import FramingError, InvalidArgumentError
from services.numerics import RealArray

HEADER_BYTES = 5  # user id (16 bits), latent size (16 bits), bits per entry (8 bits)


@dataclass(frozen=True)
class QuantizedLatent:
    """Big-endian payload bits of one or more latent vectors"""
    bits: np.ndarray
    bits_per_entry: int
    d_latent: int
    saturated: int


def _step(B: int) -> float:
    if B < 1:
        raise InvalidArgumentError(f"bits per entry must be >= 1, got {B}")
    return 2.0 / 2 ** B


def quantize(z: RealArray, B: int) -> QuantizedLatent:
    """Uniform mid-rise quantizer with 2^B cells on [-1, 1]

    Entries outside [-1, 1] are clamped and counted as saturated.
    """
    step = _step(B)
    z = np.asarray(z, dtype=np.float64)
    saturated = int(np.count_nonzero(np.abs(z) > 1.0))
    index = np.clip(np.floor((z + 1.0) / step), 0, 2 ** B - 1).astype(np.int64)
    shifts = np.arange(B - 1, -1, -1, dtype=np.int64)
    bits = ((index[..., None] >> shifts) & 1).astype(np.uint8)
    bits = bits.reshape(*z.shape[:-1], z.shape[-1] * B)
    return QuantizedLatent(bits=bits, bits_per_entry=B, d_latent=z.shape[-1], saturated=saturated)


def dequantize(bits: np.ndarray, B: int, d_latent: int) -> RealArray:
    """Cell-midpoint reconstruction of quantize's payload"""
    step = _step(B)
    bits = np.asarray(bits)
    if bits.shape[-1] != B * d_latent:
        raise FramingError(f"expected {B * d_latent} payload bits, got {bits.shape[-1]}")
    if np.any((bits != 0) & (bits != 1)):
        raise FramingError("payload contains values other than 0 and 1")
    grouped = bits.reshape(*bits.shape[:-1], d_latent, B).astype(np.int64)
    weights = 2 ** np.arange(B - 1, -1, -1, dtype=np.int64)
    index = grouped @ weights
    return -1.0 + (index + 0.5) * step


def gaussian_error(shape: Tuple[int, ...], sigma2_z: float, convention: str, rng: np.random.Generator) -> RealArray:
    """Real latent error: N(0, s2) or the real part of CN(0, s2), i.e. N(0, s2/2)"""
    if sigma2_z < 0:
        raise InvalidArgumentError(f"sigma2_z must be >= 0, got {sigma2_z}")
    variance = sigma2_z if convention == "real" else sigma2_z / 2.0
    return np.sqrt(variance) * rng.standard_normal(shape)


def apply_feedback_error(z: RealArray, model: FeedbackChannelModel, rng: np.random.Generator) -> RealArray:
    """Latents as recovered at the BS"""
    z = np.asarray(z, dtype=np.float64)
    if model.mode == "additive-gaussian":
        return z + gaussian_error(z.shape, model.sigma2_z, model.gaussian, rng)
    q = quantize(z, model.bits)
    z_hat = dequantize(q.bits, model.bits, z.shape[-1])
    if model.mode == "quantizer-plus-gaussian":
        z_hat = z_hat + gaussian_error(z.shape, model.sigma2_z, model.gaussian, rng)
    return z_hat


def pack_frame(user_id: int, quantized: QuantizedLatent) -> bytes:
    """Header followed by the payload bits, zero-padded to whole bytes"""
    B, d = quantized.bits_per_entry, quantized.d_latent
    if not 0 <= user_id < 2 ** 16 or not 0 < d < 2 ** 16 or not 0 < B < 2 ** 8:
        raise FramingError(f"header fields out of range: user={user_id}, d={d}, B={B}")
    payload = np.asarray(quantized.bits, dtype=np.uint8).reshape(-1)
    if payload.size != B * d:
        raise FramingError(f"frame carries one latent of {B * d} bits, got {payload.size}")
    header = user_id.to_bytes(2, "big") + d.to_bytes(2, "big") + B.to_bytes(1, "big")
    return header + np.packbits(payload, bitorder="big").tobytes()


def unpack_frame(frame: bytes) -> Tuple[int, QuantizedLatent]:
    """Inverse of pack_frame"""
    if len(frame) < HEADER_BYTES:
        raise FramingError(f"frame shorter than its {HEADER_BYTES}-byte header")
    user_id = int.from_bytes(frame[0:2], "big")
    d = int.from_bytes(frame[2:4], "big")
    B = frame[4]
    n_bits = B * d
    expected = HEADER_BYTES + (n_bits + 7) // 8
    if B == 0 or d == 0 or len(frame) != expected:
        raise FramingError(f"frame length {len(frame)} does not match header (d={d}, B={B})")
    bits = np.unpackbits(np.frombuffer(frame[HEADER_BYTES:], dtype=np.uint8), bitorder="big")
    if np.any(bits[n_bits:]):
        raise FramingError("nonzero padding bits")
    return user_id, QuantizedLatent(bits=bits[:n_bits], bits_per_entry=B, d_latent=d, saturated=0)
