"""MLPs with linear / diagonal-Gaussian heads, Gaussian math, and Adam.

Three head flavors:
  * ``linear`` — plain vector output.
  * ``gaussian`` — mean from the net, state-independent learnable log-std.
  * ``gaussian_statedep`` — the net outputs [mean, log_std] jointly
    (used by the variational encoder and the learnable prior).

Log-stds are clamped to [LOG_STD_MIN, LOG_STD_MAX] in all heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)

_ACTIVATIONS = {"elu": ad.elu, "tanh": ad.tanh, "relu": ad.relu}


@dataclass
class MlpSpec:
    in_dim: int
    hidden: tuple
    out_dim: int
    activation: str = "elu"
    head: str = "linear"  # linear | gaussian | gaussian_statedep
    init_log_std: float = -1.0
    out_gain: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.in_dim < 1 or self.out_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all widths must be >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.head not in ("linear", "gaussian", "gaussian_statedep"):
            raise ValueError(f"unknown head {self.head!r}")


@dataclass
class DiagGaussian:
    """Diagonal Gaussian given by mean and log-std tensors of equal shape."""

    mean: Tensor
    log_std: Tensor

    @property
    def std(self):
        return ad.exp(self.log_std)


def orthogonal(rng, rows, cols, gain, dtype=np.float32):
    a = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(a if rows >= cols else a.T)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray((gain * q[:rows, :cols]).astype(dtype))


class Mlp:
    """Fully connected net; parameters are named float32 Tensors.

    `dtype` exists so gradient tests can build float64 twins; production
    networks stay float32.
    """

    def __init__(self, spec: MlpSpec, rng, dtype=np.float32):
        self.spec = spec
        self.act = _ACTIVATIONS[spec.activation]
        out_dim = spec.out_dim * (2 if spec.head == "gaussian_statedep" else 1)
        dims = [spec.in_dim, *spec.hidden, out_dim]
        self.weights = []
        self.biases = []
        for li in range(len(dims) - 1):
            gain = spec.out_gain if li == len(dims) - 2 else math.sqrt(2.0)
            w = Tensor(orthogonal(rng, dims[li], dims[li + 1], gain, dtype), requires_grad=True)
            b = Tensor(np.zeros(dims[li + 1], dtype=dtype), requires_grad=True)
            self.weights.append(w)
            self.biases.append(b)
        if spec.head == "gaussian":
            self.log_std = Tensor(
                np.full(spec.out_dim, spec.init_log_std, dtype=dtype), requires_grad=True
            )
        else:
            self.log_std = None

    def parameters(self):
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"w{i}"] = w
            named[f"b{i}"] = b
        if self.log_std is not None:
            named["log_std"] = self.log_std
        return named

    def load_state(self, arrays, prefix=""):
        for name, p in self.parameters().items():
            src = arrays[prefix + name]
            if src.shape != p.value.shape:
                raise ValueError(
                    f"parameter {prefix + name}: stored shape {src.shape} != {p.value.shape}"
                )
            p.value = src.astype(p.value.dtype)

    def state(self, prefix=""):
        return {prefix + name: p.value for name, p in self.parameters().items()}

    def __call__(self, x: Tensor):
        if x.value.shape[-1] != self.spec.in_dim:
            raise ad.AutodiffError(
                f"input layer: width {x.value.shape[-1]} does not match expected {self.spec.in_dim}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = self.act(h)
        if self.spec.head == "linear":
            return h
        if self.spec.head == "gaussian":
            ls = ad.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
            ls = ad.add(ls, Tensor(np.zeros_like(h.value)))  # broadcast to batch shape
            return DiagGaussian(h, ls)
        d = self.spec.out_dim
        mean = h[..., :d]
        ls = ad.clip(h[..., d:], LOG_STD_MIN, LOG_STD_MAX)
        return DiagGaussian(mean, ls)


def gaussian_log_prob(dist: DiagGaussian, x) -> Tensor:
    """Summed log-density over the last axis."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    z = ad.mul(ad.sub(x, dist.mean), ad.exp(ad.mul(dist.log_std, -1.0)))
    per_dim = ad.sub(ad.mul(ad.square(z), -0.5), ad.add(dist.log_std, 0.5 * _LOG_2PI))
    return ad.tsum(per_dim, axis=-1)


def gaussian_entropy(dist: DiagGaussian) -> Tensor:
    per_dim = ad.add(dist.log_std, 0.5 * (1.0 + _LOG_2PI))
    return ad.tsum(per_dim, axis=-1)


def kl_diag_gaussians(p: DiagGaussian, q: DiagGaussian) -> Tensor:
    """KL(p || q), summed over the last axis. Closed form."""
    var_p = ad.exp(ad.mul(p.log_std, 2.0))
    inv_var_q = ad.exp(ad.mul(q.log_std, -2.0))
    dmean = ad.sub(q.mean, p.mean)
    quad = ad.mul(ad.mul(ad.add(var_p, ad.square(dmean)), inv_var_q), 0.5)
    per_dim = ad.sub(ad.add(ad.sub(q.log_std, p.log_std), quad), 0.5)
    return ad.tsum(per_dim, axis=-1)


def reparameterize(dist: DiagGaussian, noise) -> Tensor:
    noise = noise if isinstance(noise, Tensor) else Tensor(np.asarray(noise))
    return ad.add(dist.mean, ad.mul(dist.std, noise))


def categorical_log_prob(logits: Tensor, onehot) -> Tensor:
    ls = ad.log_softmax(logits, axis=-1)
    onehot = onehot if isinstance(onehot, Tensor) else Tensor(np.asarray(onehot))
    return ad.tsum(ad.mul(ls, onehot), axis=-1)


def categorical_entropy(logits: Tensor) -> Tensor:
    ls = ad.log_softmax(logits, axis=-1)
    return ad.mul(ad.tsum(ad.mul(ad.exp(ls), ls), axis=-1), -1.0)


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def clip_grad_norm(self, max_norm):
        # clip per top-level group ("a.", "c.", ...): the groups are separate
        # networks, and a global norm lets a hot critic gradient crush the
        # actor's update by orders of magnitude
        groups = {}
        for k, p in self.params.items():
            if p.grad is not None:
                groups.setdefault(k.split(".", 1)[0], []).append(p)
        total = 0.0
        for ps in groups.values():
            gsq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in ps)
            total += gsq
            norm = math.sqrt(gsq)
            if norm > max_norm > 0.0:
                scale = max_norm / norm
                for p in ps:
                    p.grad *= scale
        return math.sqrt(total)

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1t = 1.0 - self.beta1**t
        b2t = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= (self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)).astype(
                p.value.dtype
            )
