"""Stage-3 fusion: a hypernetwork maps an image's style code to per-branch
weights, every target branch runs on the input, and the branch probability
maps are convexly combined.  Adversarial alignment continues on the fused
output while the normalization banks stay frozen (eval-mode statistics).

Besides the learned weighting, three non-adaptive baselines are available:
uniform averaging, softmin-of-centroid-distance weighting, and exact one-hot
routing by cluster assignment (which reproduces split-stage behavior).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .split import stage_rngs

FUSION_VARIANTS = ("hyper", "average", "distance", "onehot")


class FuseError(ValueError):
    pass


class Hypernetwork:
    """Two-layer perceptron: style code (8) -> hidden (relu) -> K, softmax.

    The output layer starts at zero, so an untrained hypernetwork weights all
    branches uniformly and training sharpens from there.
    """

    def __init__(self, rng, in_dim=8, hidden=32, k=4):
        self.in_dim, self.hidden, self.k = in_dim, hidden, k
        self.params = {
            "w1": Tensor(rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(in_dim, hidden)),
                         requires_grad=True),
            "b1": Tensor(np.zeros(hidden), requires_grad=True),
            "w2": Tensor(np.zeros((hidden, k)), requires_grad=True),
            "b2": Tensor(np.zeros(k), requires_grad=True),
        }

    def forward(self, codes, override: dict | None = None) -> Tensor:
        """Branch weights (N, K) on the simplex for style codes (N, in_dim)."""
        p = self.params if override is None else {**self.params, **override}
        x = ad.as_tensor(codes)
        if x.ndim == 1:
            x = ad.reshape(x, (1, x.size))
        if x.shape[1] != self.in_dim:
            raise FuseError(f"style code dim {x.shape[1]} != {self.in_dim}")
        h = ad.relu(ad.add(ad.matmul(x, p["w1"]), ad.reshape(p["b1"], (1, self.hidden))))
        logits = ad.add(ad.matmul(h, p["w2"]), ad.reshape(p["b2"], (1, self.k)))
        return ad.softmax(logits, axis=1)

    def state_arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for name, t in self.params.items():
            t.data = np.asarray(arrays[name], dtype=np.float64).reshape(t.shape)


def distance_weights(codes: np.ndarray, centroids: np.ndarray, temp: float = 1.0) -> np.ndarray:
    """Softmin of Euclidean code-to-centroid distances (non-adaptive baseline)."""
    codes = np.atleast_2d(codes)
    d = np.sqrt(((codes[:, None, :] - centroids[None]) ** 2).sum(axis=2))
    z = -d / temp
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def onehot_weights(codes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact one-hot at the nearest centroid; reproduces branch routing."""
    codes = np.atleast_2d(codes)
    d2 = ((codes[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    w = np.zeros_like(d2)
    w[np.arange(len(codes)), d2.argmin(axis=1)] = 1.0
    return w


def fusion_weights(
    variant: str,
    codes: np.ndarray,
    hyper: Hypernetwork | None,
    centroids: np.ndarray | None,
    temp: float = 1.0,
    override: dict | None = None,
) -> Tensor:
    """Branch weights for a batch under the chosen fusion variant.  Only the
    hypernetwork variant produces differentiable weights."""
    if variant == "hyper":
        if hyper is None:
            raise FuseError("hyper fusion needs a hypernetwork")
        return hyper.forward(codes, override=override)
    codes = np.atleast_2d(codes)
    if variant == "average":
        k = centroids.shape[0] if centroids is not None else hyper.k
        return Tensor(np.full((len(codes), k), 1.0 / k))
    if variant == "distance":
        return Tensor(distance_weights(codes, centroids, temp))
    if variant == "onehot":
        return Tensor(onehot_weights(codes, centroids))
    raise FuseError(f"unknown fusion variant {variant!r}")


def branch_probs(G, x, train: bool = False, override: dict | None = None) -> list:
    """Probability maps of every target branch (banks 1..K) on the same input."""
    x = ad.as_tensor(x)
    return [
        G.forward(x, bank=b + 1, train=train, override=override)
        for b in range(G.num_target_banks)
    ]


def combine_branches(probs: list, weights: Tensor) -> Tensor:
    """Per-sample convex combination of branch probability maps.

    A one-hot weight row reproduces that branch's output bit-exactly
    (scaling by 1 and adding exact zeros).
    """
    k = len(probs)
    if weights.shape[-1] != k:
        raise FuseError(f"weight length {weights.shape[-1]} != {k} branches")
    n = probs[0].shape[0]
    if weights.shape[0] != n:
        raise FuseError(f"{weights.shape[0]} weight rows for batch of {n}")
    fused = None
    for b in range(k):
        basis = np.zeros((k, 1))
        basis[b, 0] = 1.0
        w_col = ad.reshape(ad.matmul(weights, Tensor(basis)), (n, 1, 1, 1))
        term = ad.mul(probs[b], w_col)
        fused = term if fused is None else ad.add(fused, term)
    return fused


def fused_prediction(
    G,
    x,
    weights: Tensor,
    train: bool = False,
    override: dict | None = None,
) -> Tensor:
    """Weighted combination of all target-branch probability maps on one input."""
    return combine_branches(branch_probs(G, x, train, override), weights)


def fuse_adv_loss(D, fused: Tensor) -> Tensor:
    """Generator-side adversarial loss on the fused prediction."""
    return nn.bce_toward_real(D.forward(fused))


def fuse_d_loss(D, source_probs: Tensor, fused: Tensor) -> Tensor:
    """Discriminator loss: source prediction real, fused prediction fake.
    Inputs are detached; only discriminator parameters receive gradients."""
    return ad.add(
        nn.bce_toward_real(D.forward(source_probs.detach())),
        nn.bce_toward_fake(D.forward(fused.detach())),
    )


def fuse_objective(l_seg: Tensor, l_fadv: Tensor | None, lam2: float) -> Tensor:
    if l_fadv is None or lam2 == 0.0:
        return l_seg
    return ad.add(l_seg, ad.scale(l_fadv, lam2))


def weight_entropy(weights: np.ndarray) -> tuple[float, float]:
    """(mean, max) entropy of weight rows; uniform rows hit ln K."""
    w = np.clip(np.atleast_2d(weights), 1e-12, 1.0)
    ent = -(w * np.log(w)).sum(axis=1)
    return float(ent.mean()), float(ent.max())


def trainable_fuse_params(G, H) -> dict:
    """Fuse/meta-stage parameter set: conv weights and the hypernetwork.
    Normalization banks are frozen in these stages."""
    params = {f"segnet.{n}": G.params[n] for n in G.conv_param_names()}
    if H is not None:
        params.update({f"hyper.{n}": t for n, t in H.params.items()})
    return params


def train_fuse(
    G,
    D,
    source_images: np.ndarray,
    source_labels: np.ndarray,
    target_images: np.ndarray,
    target_codes: np.ndarray,
    centroids: np.ndarray,
    cfg,
    stage_seed: int,
    fusion: str | None = None,
):
    """Fuse-stage training from a split-stage model.

    Returns (H, rows); G and D are updated in place.  Rows log per-iteration
    scalars plus the mean/max entropy of the fusion weights used.
    """
    fusion = cfg.fusion if fusion is None else fusion
    if fusion not in FUSION_VARIANTS:
        raise FuseError(f"unknown fusion variant {fusion!r}")
    rngs = stage_rngs(stage_seed)
    H = Hypernetwork(rngs["g_init"], in_dim=cfg.style_dim, hidden=cfg.hyper_hidden, k=cfg.k)

    horizon = int(cfg.fuse_iters * cfg.sched_horizon)
    sched_g = nn.PolySchedule(cfg.sgd_lr, horizon, cfg.poly_power)
    sched_d = nn.PolySchedule(cfg.adam_lr, horizon, cfg.poly_power)
    conv_params = {n: G.params[n] for n in G.conv_param_names()}
    opt_g = nn.SgdOptimizer(conv_params, cfg.sgd_momentum, cfg.weight_decay)
    opt_h = nn.SgdOptimizer(H.params, cfg.sgd_momentum, cfg.weight_decay)
    opt_d = nn.AdamOptimizer(D.params, cfg.adam_beta1, cfg.adam_beta2)

    conv_names = list(conv_params)
    h_names = list(H.params)
    d_names = list(D.params)
    n_src, n_tgt = len(source_images), len(target_images)
    rows = []
    for it in range(cfg.fuse_iters):
        lr_g = sched_g.lr(it)
        lr_d = sched_d.lr(it)

        s_idx = rngs["source"].integers(0, n_src, size=cfg.source_batch)
        src_probs = G.forward(Tensor(source_images[s_idx]), bank=0, train=False)
        l_seg = nn.seg_cross_entropy(src_probs, source_labels[s_idx])

        t_idx = rngs["target"].integers(0, n_tgt, size=cfg.target_batch)
        w = fusion_weights(fusion, target_codes[t_idx], H, centroids, cfg.distance_temp)
        fused = fused_prediction(G, target_images[t_idx], w)
        l_fadv = fuse_adv_loss(D, fused)
        loss = fuse_objective(l_seg, l_fadv, cfg.lambda2)

        targets = [conv_params[n] for n in conv_names] + [H.params[n] for n in h_names]
        grads = ad.grad(loss, targets)
        opt_g.step(dict(zip(conv_names, grads[: len(conv_names)])), lr_g)
        if fusion == "hyper":
            opt_h.step(dict(zip(h_names, grads[len(conv_names):])), lr_g * cfg.hyper_lr_scale)

        l_fd = fuse_d_loss(D, src_probs, fused)
        d_grads = ad.grad(l_fd, [D.params[n] for n in d_names])
        opt_d.step(dict(zip(d_names, d_grads)), lr_d)

        ent_mean, ent_max = weight_entropy(w.data)
        rows.append(
            {
                "iter": it,
                "l_seg": l_seg.item(),
                "l_fadv": l_fadv.item(),
                "l_fd": l_fd.item(),
                "lr": lr_g,
                "w_ent_mean": ent_mean,
                "w_ent_max": ent_max,
            }
        )
    return H, rows
