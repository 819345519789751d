"""
Beamsim Network Service
Fully-connected encoder, beamformer decoder and channel decoder with manual
backpropagation, the power-normalization layer and SGD/Adam optimizers

Batches are rows: every layer maps (B, fan_in) to (B, fan_out).
"""

import math
from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.experiment import NetConfig, ScenarioConfig
from services.errors import DegenerateOutputError, InvalidArgumentError, StateError
from services.numerics import ComplexArray, RealArray, derealify, frobenius_sq, hermitian, realify


class Layer:
    """Base layer: parameters, gradients and a forward cache"""

    def __init__(self):
        self.params: "OrderedDict[str, RealArray]" = OrderedDict()
        self.grads: Dict[str, RealArray] = {}
        self.buffers: "OrderedDict[str, RealArray]" = OrderedDict()
        self._cache = None

    def forward(self, x: RealArray, training: bool, rng: Optional[np.random.Generator], reuse_masks: bool) -> RealArray:
        raise NotImplementedError

    def backward(self, grad: RealArray) -> RealArray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Linear(Layer):
    """y = x W^T + b"""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, init: str = "he", slope: float = 0.01):
        super().__init__()
        if init == "he":
            bound = math.sqrt(6.0 / ((1.0 + slope ** 2) * fan_in))
        else:
            bound = math.sqrt(6.0 / (fan_in + fan_out))
        self.params["weight"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        self.params["bias"] = np.zeros(fan_out)

    def forward(self, x, training, rng, reuse_masks):
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad):
        x = self._cached()
        self.grads["weight"] = grad.T @ x
        self.grads["bias"] = grad.sum(axis=0)
        return grad @ self.params["weight"]


class BatchNorm1d(Layer):
    """Per-feature batch normalization with running statistics"""

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(dim)
        self.params["beta"] = np.zeros(dim)
        self.buffers["running_mean"] = np.zeros(dim)
        self.buffers["running_var"] = np.ones(dim)

    def forward(self, x, training, rng, reuse_masks):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if training:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if not reuse_masks:
                n = x.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                self.buffers["running_mean"] *= 1.0 - self.momentum
                self.buffers["running_mean"] += self.momentum * mean
                self.buffers["running_var"] *= 1.0 - self.momentum
                self.buffers["running_var"] += self.momentum * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._cache = (x_hat, inv_std, training)
        return gamma * x_hat + beta

    def backward(self, grad):
        x_hat, inv_std, training = self._cached()
        gamma = self.params["gamma"]
        self.grads["gamma"] = np.sum(grad * x_hat, axis=0)
        self.grads["beta"] = grad.sum(axis=0)
        d_hat = grad * gamma
        if not training:
            return d_hat * inv_std
        n = grad.shape[0]
        return inv_std / n * (n * d_hat - d_hat.sum(axis=0) - x_hat * np.sum(d_hat * x_hat, axis=0))


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x, training, rng, reuse_masks):
        positive = x > 0
        self._cache = positive
        return np.where(positive, x, self.slope * x)

    def backward(self, grad):
        return grad * np.where(self._cached(), 1.0, self.slope)


class Tanh(Layer):
    def forward(self, x, training, rng, reuse_masks):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, grad):
        return grad * (1.0 - self._cached() ** 2)


class Dropout(Layer):
    """Inverted dropout; identity outside training"""

    def __init__(self, rate: float):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise InvalidArgumentError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask: Optional[RealArray] = None

    def forward(self, x, training, rng, reuse_masks):
        if not training or self.rate == 0.0:
            self._cache = None
            self._mask = None
            return x
        if reuse_masks and self._mask is not None and self._mask.shape == x.shape:
            mask = self._mask
        else:
            if rng is None:
                raise InvalidArgumentError("training-mode dropout needs a random generator")
            mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        self._mask = mask
        self._cache = mask
        return x * mask

    def backward(self, grad):
        # None cache means the forward pass was an identity
        return grad if self._cache is None else grad * self._cache


class Mlp:
    """Stack of layers described by an architecture descriptor"""

    def __init__(self, descriptor: dict, layers: List[Layer]):
        self.descriptor = descriptor
        self.layers = layers
        self._ready = False

    @property
    def in_dim(self) -> int:
        return self.descriptor["in"]

    @property
    def out_dim(self) -> int:
        return self.descriptor["out"]

    def forward(
        self,
        x: RealArray,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
        reuse_masks: bool = False,
    ) -> RealArray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise InvalidArgumentError(f"{self.descriptor['name']} expects (B, {self.in_dim}) input, got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, training, rng, reuse_masks)
        self._ready = True
        return x

    def backward(self, grad: RealArray) -> RealArray:
        """Fill parameter gradients and return the gradient with respect to the input"""
        if not self._ready:
            raise StateError(f"{self.descriptor['name']}.backward called before forward")
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_parameters(self) -> List[Tuple[str, RealArray]]:
        return [(f"{i}.{name}", value) for i, layer in enumerate(self.layers) for name, value in layer.params.items()]

    def named_buffers(self) -> List[Tuple[str, RealArray]]:
        return [(f"{i}.{name}", value) for i, layer in enumerate(self.layers) for name, value in layer.buffers.items()]

    def named_grads(self) -> Dict[str, RealArray]:
        grads = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                grads[f"{i}.{name}"] = layer.grads.get(name, np.zeros_like(value))
        return grads

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.grads = {}

    def state_dict(self) -> "OrderedDict[str, RealArray]":
        return OrderedDict(self.named_parameters() + self.named_buffers())

    def load_state_dict(self, state: Dict[str, RealArray]) -> None:
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    value = np.asarray(state[f"{i}.{name}"], dtype=np.float64)
                    if value.shape != store[name].shape:
                        raise InvalidArgumentError(f"shape mismatch for {i}.{name}: {value.shape} vs {store[name].shape}")
                    store[name][...] = value

    def copy(self) -> "Mlp":
        clone = build_mlp(self.descriptor, np.random.default_rng(0))
        clone.load_state_dict(self.state_dict())
        return clone

    def parameter_count(self) -> int:
        return sum(value.size for _, value in self.named_parameters())


def build_mlp(descriptor: dict, rng: np.random.Generator) -> Mlp:
    """Linear -> [BatchNorm] -> LeakyReLU -> [Dropout] per hidden width, then a Linear head"""
    slope = descriptor.get("slope", 0.01)
    widths = [descriptor["in"], *descriptor["hidden"]]
    layers: List[Layer] = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        layers.append(Linear(fan_in, fan_out, rng, init="he", slope=slope))
        if descriptor.get("batchnorm", False):
            layers.append(BatchNorm1d(fan_out, descriptor.get("bn_momentum", 0.1), descriptor.get("bn_eps", 1e-5)))
        layers.append(LeakyReLU(slope))
        if descriptor.get("dropout", 0.0) > 0:
            layers.append(Dropout(descriptor["dropout"]))
    layers.append(Linear(widths[-1], descriptor["out"], rng, init="xavier"))
    if descriptor.get("head") == "tanh":
        layers.append(Tanh())
    return Mlp(descriptor, layers)


def _descriptor(name: str, fan_in: int, hidden: List[int], fan_out: int, head: str, nets: NetConfig,
                batchnorm: bool, dropout: float) -> dict:
    return {
        "name": name,
        "in": fan_in,
        "hidden": list(hidden),
        "out": fan_out,
        "head": head,
        "slope": nets.leaky_slope,
        "batchnorm": batchnorm,
        "bn_momentum": nets.bn_momentum,
        "bn_eps": nets.bn_eps,
        "dropout": dropout,
    }


def encoder_descriptor(scenario: ScenarioConfig, nets: NetConfig) -> dict:
    M = scenario.system.M
    return _descriptor("encoder", 2 * M * scenario.n_eff, nets.encoder_hidden, nets.d_latent, "tanh", nets,
                       nets.encoder_batchnorm, 0.0)


def beamformer_decoder_descriptor(scenario: ScenarioConfig, nets: NetConfig) -> dict:
    K, M = scenario.system.K, scenario.system.M
    return _descriptor("beamformer_decoder", K * nets.d_latent, nets.beamdec_hidden, 2 * scenario.n_eff * K * M,
                       "identity", nets, nets.beamdec_batchnorm, nets.beamdec_dropout)


def channel_decoder_descriptor(scenario: ScenarioConfig, nets: NetConfig) -> dict:
    M = scenario.system.M
    return _descriptor("channel_decoder", nets.d_latent, nets.chandec_hidden, 2 * M * scenario.n_eff, "identity",
                       nets, nets.chandec_batchnorm, 0.0)


def build_networks(scenario: ScenarioConfig, nets: NetConfig, seed: int) -> Tuple[Mlp, Mlp, Mlp]:
    """Encoder, beamformer decoder and channel decoder with independent init streams"""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]
    return (
        build_mlp(encoder_descriptor(scenario, nets), streams[0]),
        build_mlp(beamformer_decoder_descriptor(scenario, nets), streams[1]),
        build_mlp(channel_decoder_descriptor(scenario, nets), streams[2]),
    )


class PowerNormalization:
    """W = sqrt(P) W_tilde / ||A W_tilde||_F with A = I (digital) or the analog matrix (hybrid)"""

    def __init__(self, P: float):
        if P <= 0:
            raise InvalidArgumentError(f"power budget must be positive, got {P}")
        self.P = P
        self._cache = None

    def forward(self, W_tilde: ComplexArray, analog: Optional[ComplexArray] = None) -> ComplexArray:
        AW = W_tilde if analog is None else analog @ W_tilde
        norm = np.sqrt(frobenius_sq(AW))
        if np.any(norm == 0):
            raise DegenerateOutputError("beamformer decoder produced an all-zero output")
        self._cache = (W_tilde, analog, AW, norm)
        return math.sqrt(self.P) * W_tilde / np.asarray(norm)[..., None, None]

    def backward(self, grad: ComplexArray) -> ComplexArray:
        """Gradient with respect to W_tilde given the gradient with respect to W"""
        if self._cache is None:
            raise StateError("PowerNormalization.backward called before forward")
        W_tilde, analog, AW, norm = self._cache
        norm = np.asarray(norm)[..., None, None]
        grad_norm = (W_tilde if analog is None else hermitian(analog) @ AW) / norm
        radial = np.sum((np.conj(grad) * W_tilde).real, axis=(-2, -1))[..., None, None]
        return math.sqrt(self.P) * (grad / norm - radial * grad_norm / norm ** 2)


def encode(
    encoder: Mlp,
    H_tilde: ComplexArray,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    reuse_masks: bool = False,
) -> RealArray:
    """Latent vectors for stacked user channels (..., M, N) -> (prod(...), d), entries in [-1, 1]"""
    if H_tilde.ndim < 2 or 2 * H_tilde.shape[-1] * H_tilde.shape[-2] != encoder.in_dim:
        raise InvalidArgumentError(f"encoder expects 2MN = {encoder.in_dim} inputs, got channels of shape {H_tilde.shape}")
    x = realify(H_tilde).reshape(-1, encoder.in_dim)
    return encoder.forward(x, training, rng, reuse_masks)


def decode_channel(
    chandec: Mlp,
    z_hat: RealArray,
    M: int,
    N: int,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ComplexArray:
    """Reconstructed channels (B, M, N) from latents (B, d)"""
    z_hat = np.atleast_2d(z_hat)
    if chandec.out_dim != 2 * M * N:
        raise InvalidArgumentError(f"channel decoder emits {chandec.out_dim} values, need 2MN = {2 * M * N}")
    return derealify(chandec.forward(z_hat, training, rng), M, N)


def decode_beamformer(
    beamdec: Mlp,
    z_hat_all: RealArray,
    P: float,
    output_shape: Tuple[int, int],
    analog: Optional[ComplexArray] = None,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> ComplexArray:
    """Power-normalized beamformers (B, rows, KM) from concatenated latents (B, K*d)"""
    rows, cols = output_shape
    if beamdec.out_dim != 2 * rows * cols:
        raise InvalidArgumentError(f"beamformer decoder emits {beamdec.out_dim} values, need {2 * rows * cols}")
    W_tilde = derealify(beamdec.forward(np.atleast_2d(z_hat_all), training, rng), rows, cols)
    return PowerNormalization(P).forward(W_tilde, analog)


class Optimizer:
    """Updates an Mlp in place from its stored gradients"""

    def __init__(self, net: Mlp, lr: float):
        if lr < 0:
            raise InvalidArgumentError(f"learning rate must be >= 0, got {lr}")
        self.net = net
        self.lr = lr
        self.steps = 0

    def step(self) -> None:
        grads = self.net.named_grads()
        for name, param in self.net.named_parameters():
            param -= self._update(name, grads[name])
        self.steps += 1

    def _update(self, name: str, grad: RealArray) -> RealArray:
        raise NotImplementedError


class SGD(Optimizer):
    def _update(self, name, grad):
        return self.lr * grad


class Adam(Optimizer):
    def __init__(self, net: Mlp, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        super().__init__(net, lr)
        self.betas = betas
        self.eps = eps
        self._m: Dict[str, RealArray] = {}
        self._v: Dict[str, RealArray] = {}

    def _update(self, name, grad):
        b1, b2 = self.betas
        m = self._m.setdefault(name, np.zeros_like(grad))
        v = self._v.setdefault(name, np.zeros_like(grad))
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad ** 2
        t = self.steps + 1
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, net: Mlp, lr: float) -> Optimizer:
    if kind == "sgd":
        return SGD(net, lr)
    if kind == "adam":
        return Adam(net, lr)
    raise InvalidArgumentError(f"unknown optimizer {kind!r}")
