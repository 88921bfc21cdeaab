"""Network building blocks and optimizers for the segmentation pipeline.

Models keep their parameters in a flat name -> Tensor dict so a forward pass
can run against substituted parameters (the meta-learner evaluates losses at
a hypothetical post-step parameter set without touching the real ones).
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_FLOOR = 1e-12


class NnError(ValueError):
    """Invalid model usage: bad bank index, degenerate batch, label overflow."""


def _he_conv(rng, cout, cin, k) -> np.ndarray:
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k))


class Conv2d:
    """Configuration of one convolution; weights live in the owning model's dict."""

    def __init__(self, name, cin, cout, k, stride=1, padding=0):
        self.name = name
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding

    def init_params(self, rng, params: dict, weight_std: float | None = None) -> None:
        if weight_std is None:
            w = _he_conv(rng, self.cout, self.cin, self.k)
        else:
            w = rng.normal(0.0, weight_std, size=(self.cout, self.cin, self.k, self.k))
        params[f"{self.name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{self.name}.bias"] = Tensor(np.zeros(self.cout), requires_grad=True)

    def forward(self, x, params: dict):
        return ad.conv2d(
            x,
            params[f"{self.name}.weight"],
            params[f"{self.name}.bias"],
            stride=self.stride,
            padding=self.padding,
        )


class CdbnLayer:
    """Batch normalization with one parameter/statistics bank per domain.

    Bank 0 belongs to the source domain, banks 1..K to the clustered
    sub-target domains.  A forward pass touches exactly one bank: train mode
    normalizes by the current batch statistics and folds them into that
    bank's running estimates; eval mode normalizes by the bank's running
    estimates and changes nothing.
    """

    def __init__(self, name, channels, num_target_banks, momentum=0.1, eps=1e-5):
        if eps <= 0:
            raise NnError("cdbn: epsilon must be positive")
        self.name = name
        self.channels = channels
        self.num_banks = num_target_banks + 1
        self.momentum = momentum
        self.eps = eps
        self.running_mean = [np.zeros(channels) for _ in range(self.num_banks)]
        self.running_var = [np.ones(channels) for _ in range(self.num_banks)]

    def param_names(self):
        for b in range(self.num_banks):
            yield f"{self.name}.bank{b}.gamma"
            yield f"{self.name}.bank{b}.beta"

    def init_params(self, params: dict) -> None:
        for b in range(self.num_banks):
            params[f"{self.name}.bank{b}.gamma"] = Tensor(
                np.ones(self.channels), requires_grad=True
            )
            params[f"{self.name}.bank{b}.beta"] = Tensor(
                np.zeros(self.channels), requires_grad=True
            )

    def forward(self, x, bank: int, train: bool, params: dict):
        if not 0 <= bank < self.num_banks:
            raise NnError(
                f"cdbn {self.name}: bank {bank} out of range 0..{self.num_banks - 1}"
            )
        if x.shape[1] != self.channels:
            raise NnError(
                f"cdbn {self.name}: expected {self.channels} channels, got {x.shape}"
            )
        c = self.channels
        gamma = params[f"{self.name}.bank{bank}.gamma"]
        beta = params[f"{self.name}.bank{bank}.beta"]
        if train:
            if x.shape[0] < 2:
                raise NnError(
                    f"cdbn {self.name}: train mode needs batch >= 2, got {x.shape[0]}"
                )
            m = ad.mean(x, axis=(0, 2, 3))  # (C,)
            v = ad.sub(ad.mean(ad.square(x), axis=(0, 2, 3)), ad.square(m))
            mom = self.momentum
            self.running_mean[bank] = (1 - mom) * self.running_mean[bank] + mom * m.data
            self.running_var[bank] = (1 - mom) * self.running_var[bank] + mom * v.data
        else:
            m = Tensor(self.running_mean[bank])
            v = Tensor(self.running_var[bank])
        # fold normalization and affine into one scale/shift pass over x:
        # y = gamma * (x - m) / sqrt(v + eps) + beta = x * s + t
        inv = ad.power(ad.add(v, Tensor(np.float64(self.eps))), -0.5)
        s = ad.mul(gamma, inv)
        t = ad.sub(beta, ad.mul(m, s))
        s4 = ad.reshape(s, (1, c, 1, 1))
        t4 = ad.reshape(t, (1, c, 1, 1))
        return ad.add(ad.mul(x, s4), t4)

    def bank_hash(self, bank: int, params: dict) -> str:
        h = hashlib.sha256()
        h.update(params[f"{self.name}.bank{bank}.gamma"].data.tobytes())
        h.update(params[f"{self.name}.bank{bank}.beta"].data.tobytes())
        h.update(self.running_mean[bank].tobytes())
        h.update(self.running_var[bank].tobytes())
        return h.hexdigest()


class SegNet:
    """Small fully-convolutional segmentation net with per-domain normalization.

    Three 3x3 conv blocks (widths 16-32-32), each followed by a CdbnLayer and
    relu, then a 1x1 head to class logits and a per-pixel softmax.  Selecting
    bank k in every CdbnLayer realizes branch k of the multi-branch network.
    """

    def __init__(
        self,
        rng,
        in_channels=3,
        num_classes=4,
        num_target_banks=4,
        widths=(16, 32, 32),
        bn_momentum=0.1,
        bn_eps=1e-5,
    ):
        self.num_classes = num_classes
        self.num_target_banks = num_target_banks
        self.params: dict[str, Tensor] = {}
        self.convs = []
        self.cdbns = []
        cin = in_channels
        for i, cout in enumerate(widths, start=1):
            conv = Conv2d(f"conv{i}", cin, cout, k=3, padding=1)
            cdbn = CdbnLayer(f"cdbn{i}", cout, num_target_banks, bn_momentum, bn_eps)
            conv.init_params(rng, self.params)
            cdbn.init_params(self.params)
            self.convs.append(conv)
            self.cdbns.append(cdbn)
            cin = cout
        self.head = Conv2d("head", cin, num_classes, k=1)
        self.head.init_params(rng, self.params)

    def forward(self, x, bank: int, train: bool = False, override: dict | None = None):
        p = self.params if override is None else {**self.params, **override}
        h = ad.as_tensor(x)
        for conv, cdbn in zip(self.convs, self.cdbns):
            h = ad.relu(cdbn.forward(conv.forward(h, p), bank, train, p))
        logits = self.head.forward(h, p)
        return ad.softmax(logits, axis=1)

    def conv_param_names(self) -> list[str]:
        names = []
        for conv in self.convs + [self.head]:
            names += [f"{conv.name}.weight", f"{conv.name}.bias"]
        return names

    def cdbn_param_names(self) -> list[str]:
        names = []
        for cdbn in self.cdbns:
            names += list(cdbn.param_names())
        return names

    def bank_hashes(self) -> dict[str, str]:
        out = {}
        for cdbn in self.cdbns:
            for b in range(cdbn.num_banks):
                out[f"{cdbn.name}.bank{b}"] = cdbn.bank_hash(b, self.params)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        for cdbn in self.cdbns:
            for b in range(cdbn.num_banks):
                out[f"{cdbn.name}.bank{b}.running_mean"] = cdbn.running_mean[b]
                out[f"{cdbn.name}.bank{b}.running_var"] = cdbn.running_var[b]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for name, t in self.params.items():
            t.data = np.asarray(arrays[name], dtype=np.float64).reshape(t.shape)
        for cdbn in self.cdbns:
            for b in range(cdbn.num_banks):
                cdbn.running_mean[b] = np.asarray(
                    arrays[f"{cdbn.name}.bank{b}.running_mean"], dtype=np.float64
                )
                cdbn.running_var[b] = np.asarray(
                    arrays[f"{cdbn.name}.bank{b}.running_var"], dtype=np.float64
                )


class Discriminator:
    """Per-pixel source/target classifier on class-probability maps.

    Four 3x3 convs (32-64-64-1) with leaky-relu 0.2 between and a sigmoid
    output.  The first two convs stride by 2, so the judgment map is spatially
    coarser than the input (one probability per output pixel), matching the
    downsampling output-space discriminators this miniaturizes.
    """

    def __init__(self, rng, in_channels, widths=(32, 64, 64), strides=(2, 2, 1)):
        self.params: dict[str, Tensor] = {}
        self.convs = []
        cin = in_channels
        for i, (cout, s) in enumerate(zip(widths, strides), start=1):
            conv = Conv2d(f"d{i}", cin, cout, k=3, stride=s, padding=1)
            conv.init_params(rng, self.params, weight_std=0.02)
            self.convs.append(conv)
            cin = cout
        self.out = Conv2d("dout", cin, 1, k=3, padding=1)
        self.out.init_params(rng, self.params, weight_std=0.02)

    def forward(self, x, override: dict | None = None):
        p = self.params if override is None else {**self.params, **override}
        h = ad.as_tensor(x)
        for conv in self.convs:
            h = ad.leaky_relu(conv.forward(h, p), 0.2)
        return ad.sigmoid(self.out.forward(h, p))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for name, t in self.params.items():
            t.data = np.asarray(arrays[name], dtype=np.float64).reshape(t.shape)


# -- losses --------------------------------------------------------------------


def seg_cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Pixelwise cross entropy against integer labels, averaged over batch and pixels."""
    labels = np.asarray(labels)
    n, m, hh, ww = probs.shape
    if labels.shape != (n, hh, ww):
        raise NnError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    if labels.min() < 0 or labels.max() >= m:
        raise NnError(f"labels must lie in [0, {m}), got range "
                      f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, m, hh, ww))
    nn_idx, hh_idx, ww_idx = np.meshgrid(
        np.arange(n), np.arange(hh), np.arange(ww), indexing="ij"
    )
    onehot[nn_idx, labels, hh_idx, ww_idx] = 1.0
    lp = ad.log(ad.clamp_min(probs, LOG_FLOOR))
    total = ad.sum_(ad.mul(lp, Tensor(onehot)))
    return ad.scale(total, -1.0 / (n * hh * ww))


def bce_toward_real(d_out: Tensor) -> Tensor:
    """-E[log D]: minimized when the discriminator calls the input source-like."""
    return ad.neg(ad.mean(ad.log(ad.clamp_min(d_out, LOG_FLOOR))))


def bce_toward_fake(d_out: Tensor) -> Tensor:
    """-E[log(1 - D)]: minimized when the discriminator rejects the input."""
    one = Tensor(np.float64(1.0))
    return ad.neg(ad.mean(ad.log(ad.clamp_min(ad.sub(one, d_out), LOG_FLOOR))))


# -- optimizers ------------------------------------------------------------------


class PolySchedule:
    """lr(i) = base * (1 - i/max_iter)^power, clamped at zero past max_iter."""

    def __init__(self, base_lr: float, max_iter: int, power: float = 0.9):
        self.base_lr = base_lr
        self.max_iter = max_iter
        self.power = power

    def lr(self, iteration: int) -> float:
        frac = max(0.0, 1.0 - iteration / self.max_iter)
        return self.base_lr * frac**self.power


class SgdOptimizer:
    """SGD with classical momentum; weight decay is added into the buffer:

        v <- momentum * v + g + weight_decay * p
        p <- p - lr * v
    """

    def __init__(self, params: dict[str, Tensor], momentum=0.9, weight_decay=5e-4):
        self.params = dict(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def step(self, grads: dict, lr: float) -> None:
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            v = self.momentum * self.buffers[name] + g + self.weight_decay * p.data
            self.buffers[name] = v
            p.data = p.data - lr * v

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.momentum.{n}": b for n, b in self.buffers.items()}


class AdamOptimizer:
    """Bias-corrected Adam (beta1=0.9, beta2=0.99, eps=1e-8 by default)."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g.data if isinstance(g, Tensor) else np.asarray(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**self.t)
            vhat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.m.{n}": a for n, a in self.m.items()}
        out.update({f"{prefix}.v.{n}": a for n, a in self.v.items()})
        out[f"{prefix}.t"] = np.array([float(self.t)])
        return out
