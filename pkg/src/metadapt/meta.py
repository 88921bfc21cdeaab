"""Meta-training around the fuse stage and one-step online updates at test.

The inner loop takes an entropy-gradient step on unlabeled target data,
mimicking how the model will update itself on an unseen domain; the outer
loss evaluates the fuse objective (plus a small entropy term) at the
post-step parameters and differentiates back to the originals.  In exact
mode that pass goes through the inner gradient (second order); first-order
mode treats the inner gradient as a constant.

The inner/outer machinery is written against a plain name->Tensor parameter
dict and a loss callable, so the same code runs the full pipeline and the
small closed-form models the tests check it with.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .fuse import fuse_d_loss, fused_prediction, fusion_weights, trainable_fuse_params, weight_entropy
from .split import stage_rngs

LOG_FLOOR = 1e-12


class MetaError(ValueError):
    pass


def entropy_loss(pred: Tensor) -> Tensor:
    """Mean per-pixel self-entropy of a probability map (N, C, H, W).

    Zero for one-hot predictions, ln C for uniform ones.
    """
    n, _, hh, ww = pred.shape
    lp = ad.log(ad.clamp_min(pred, LOG_FLOOR))
    return ad.scale(ad.sum_(ad.mul(pred, lp)), -1.0 / (n * hh * ww))


def inner_step(params: dict, loss_fn, lr: float, exact: bool = True, steps: int = 1):
    """Gradient step(s) on ``loss_fn`` returning hypothetical fast parameters.

    ``params`` maps names to leaf tensors; ``loss_fn(params)`` must return a
    scalar.  In exact mode the returned parameters are a differentiable
    function of the originals; in first-order mode the gradients are frozen
    to constants.  The stored parameters are never mutated.
    """
    names = list(params)
    current = dict(params)
    first_loss = None
    for _ in range(steps):
        loss = loss_fn(current)
        if first_loss is None:
            first_loss = float(loss.item())
        if exact:
            grads = ad.grad_graph(loss, [current[n] for n in names])
        else:
            grads = [Tensor(g.data) for g in ad.grad(loss, [current[n] for n in names])]
        current = {
            n: ad.sub(current[n], ad.scale(g, lr)) for n, g in zip(names, grads)
        }
    return current, first_loss


def meta_gradients(
    params: dict,
    inner_loss_fn,
    outer_loss_fn,
    inner_lr: float,
    exact: bool = True,
    inner_steps: int = 1,
):
    """Gradients of outer_loss(params - lr * grad inner_loss(params)) w.r.t.
    the original parameters.  Returns (grads dict, inner loss, outer loss)."""
    fast, l_in = inner_step(params, inner_loss_fn, inner_lr, exact, inner_steps)
    l_out = outer_loss_fn(fast)
    names = list(params)
    grads = ad.grad(l_out, [params[n] for n in names])
    return dict(zip(names, grads)), l_in, float(l_out.item())


def _split_overrides(fast: dict) -> tuple[dict, dict]:
    g_ov, h_ov = {}, {}
    for name, t in fast.items():
        if name.startswith("segnet."):
            g_ov[name[len("segnet."):]] = t
        elif name.startswith("hyper."):
            h_ov[name[len("hyper."):]] = t
    return g_ov, h_ov


def maml_train(
    G,
    H,
    D,
    source_images: np.ndarray,
    source_labels: np.ndarray,
    target_images: np.ndarray,
    target_codes: np.ndarray,
    centroids: np.ndarray,
    cfg,
    stage_seed: int,
):
    """Meta-training of the fuse stage (G conv weights + hypernetwork).

    Per iteration: entropy inner step on a target batch, fuse-objective outer
    step evaluated at the fast parameters (entropy term on the target portion
    only), then a discriminator update.  Returns per-iteration rows; models
    update in place.
    """
    if cfg.maml_mode not in ("exact", "first_order"):
        raise MetaError(f"unknown maml mode {cfg.maml_mode!r}")
    exact = cfg.maml_mode == "exact"
    fusion = cfg.fusion
    rngs = stage_rngs(stage_seed)

    trainable = trainable_fuse_params(G, H)
    conv_names = [n for n in trainable if n.startswith("segnet.")]
    h_names = [n for n in trainable if n.startswith("hyper.")]

    horizon = int(cfg.meta_iters * cfg.sched_horizon)
    sched_g = nn.PolySchedule(cfg.sgd_lr, horizon, cfg.poly_power)
    sched_d = nn.PolySchedule(cfg.adam_lr, horizon, cfg.poly_power)
    opt_g = nn.SgdOptimizer(
        {n: trainable[n] for n in conv_names}, cfg.sgd_momentum, cfg.weight_decay
    )
    opt_h = nn.SgdOptimizer(
        {n: trainable[n] for n in h_names}, cfg.sgd_momentum, cfg.weight_decay
    )
    opt_d = nn.AdamOptimizer(D.params, cfg.adam_beta1, cfg.adam_beta2)
    d_names = list(D.params)

    n_src, n_tgt = len(source_images), len(target_images)
    rows = []
    for it in range(cfg.meta_iters):
        lr = sched_g.lr(it)

        in_idx = rngs["target"].integers(0, n_tgt, size=cfg.target_batch)
        x_in = Tensor(target_images[in_idx])
        codes_in = target_codes[in_idx]

        def inner_fn(p):
            g_ov, h_ov = _split_overrides(p)
            w = fusion_weights(
                fusion, codes_in, H, centroids, cfg.distance_temp, override=h_ov
            )
            return entropy_loss(fused_prediction(G, x_in, w, override=g_ov))

        fast, l_in = inner_step(trainable, inner_fn, cfg.inner_lr, exact, cfg.inner_steps)
        g_ov, h_ov = _split_overrides(fast)

        s_idx = rngs["source"].integers(0, n_src, size=cfg.source_batch)
        out_idx = rngs["target"].integers(0, n_tgt, size=cfg.target_batch)

        src_probs = G.forward(Tensor(source_images[s_idx]), bank=0, train=False, override=g_ov)
        l_seg = nn.seg_cross_entropy(src_probs, source_labels[s_idx])
        w_out = fusion_weights(
            fusion, target_codes[out_idx], H, centroids, cfg.distance_temp, override=h_ov
        )
        fused_out = fused_prediction(G, target_images[out_idx], w_out, override=g_ov)
        l_fadv = nn.bce_toward_real(D.forward(fused_out))
        l_ent = entropy_loss(fused_out)
        l_out = ad.add(
            ad.add(l_seg, ad.scale(l_fadv, cfg.lambda2)), ad.scale(l_ent, cfg.delta)
        )

        names = conv_names + h_names
        grads = ad.grad(l_out, [trainable[n] for n in names])
        by_name = dict(zip(names, grads))
        opt_g.step(by_name, lr)
        if fusion == "hyper":
            opt_h.step(by_name, lr * cfg.hyper_lr_scale)

        l_fd = fuse_d_loss(D, src_probs, fused_out)
        d_grads = ad.grad(l_fd, [D.params[n] for n in d_names])
        opt_d.step(dict(zip(d_names, d_grads)), sched_d.lr(it))

        ent_mean, ent_max = weight_entropy(w_out.data)
        rows.append(
            {
                "iter": it,
                "l_in": l_in,
                "l_seg": l_seg.item(),
                "l_fadv": l_fadv.item(),
                "l_ent": l_ent.item(),
                "l_fd": l_fd.item(),
                "lr": lr,
                "w_ent_mean": ent_mean,
                "w_ent_max": ent_max,
            }
        )
    return rows


def final_training_lr(cfg, stage: str = "meta") -> float:
    """The learning rate at the last executed training iteration; online
    updates reuse it."""
    iters = cfg.meta_iters if stage == "meta" else cfg.fuse_iters
    sched = nn.PolySchedule(cfg.sgd_lr, int(iters * cfg.sched_horizon), cfg.poly_power)
    return sched.lr(max(0, iters - 1))


def online_update(
    G,
    H,
    extractor,
    centroids: np.ndarray,
    images: np.ndarray,
    cfg,
    eta: float,
    online: bool = True,
    order: np.ndarray | None = None,
):
    """Per-image streaming evaluation with optional one-step self-updates.

    For each image, in stream order: predict via the fused forward, record
    the prediction, then (if ``online``) take one plain gradient step on the
    prediction's self-entropy.  Updates touch the conv weights and the
    hypernetwork only; normalization banks are excluded and never change.
    Updates accumulate across the stream; there is no reset between images.

    Returns (preds, rows) where ``preds[i]`` is the label map recorded for
    stream position i (before that image's own update) and rows carry
    (image_id, entropy_before, entropy_after).
    """
    if len(images) == 0:
        return np.zeros((0,) + images.shape[2:], dtype=np.int64), []
    params = trainable_fuse_params(G, H)
    names = list(params)
    order = np.arange(len(images)) if order is None else np.asarray(order)

    preds = []
    rows = []
    for pos, idx in enumerate(order):
        img = images[int(idx)][None]
        code = extractor.transform(img)
        if online:
            w = fusion_weights(cfg.fusion, code, H, centroids, cfg.distance_temp)
            fused = fused_prediction(G, img, w)
            loss = entropy_loss(fused)
            e_before = float(loss.item())
            preds.append(fused.data.argmax(axis=1)[0])
            grads = ad.grad(loss, [params[n] for n in names])
            for n, g in zip(names, grads):
                params[n].data = params[n].data - eta * g.data
            with ad.no_grad():
                w2 = fusion_weights(cfg.fusion, code, H, centroids, cfg.distance_temp)
                e_after = float(entropy_loss(fused_prediction(G, img, w2)).item())
        else:
            with ad.no_grad():
                w = fusion_weights(cfg.fusion, code, H, centroids, cfg.distance_temp)
                fused = fused_prediction(G, img, w)
                e_before = float(entropy_loss(fused).item())
            preds.append(fused.data.argmax(axis=1)[0])
            e_after = e_before
        rows.append(
            {"image_id": int(idx), "entropy_before": e_before, "entropy_after": e_after}
        )
    return np.stack(preds), rows
