"""Stage-2 training: supervised segmentation on source plus multi-branch
adversarial alignment of every sub-target branch to the source prediction
distribution, with alternating generator/discriminator updates.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor


class TrainError(ValueError):
    pass


def multi_branch_adv_loss(G, D, target_batches: dict) -> tuple:
    """Generator-side adversarial loss summed over branches with samples.

    ``target_batches`` maps cluster index k -> image batch routed through
    branch k (bank k+1).  Each branch output is pushed toward the
    discriminator's source label.  The discriminator is not updated from
    this loss (the trainer steps only generator parameters with it).

    Returns (loss, {k: branch probability map}) so the discriminator step
    can reuse the maps without re-running batch normalization.
    """
    present = {k: x for k, x in target_batches.items() if np.size(getattr(x, "data", x)) > 0}
    if not present:
        raise TrainError("adversarial loss needs at least one non-empty target batch")
    total = None
    branch_probs = {}
    for k in sorted(present):
        probs = G.forward(present[k], bank=k + 1, train=True)
        branch_probs[k] = probs
        term = nn.bce_toward_real(D.forward(probs))
        total = term if total is None else ad.add(total, term)
    return total, branch_probs


def discriminator_loss_split(D, source_probs: Tensor, target_probs: dict) -> Tensor:
    """Discriminator loss: source prediction labeled real, every branch
    output labeled fake.  Inputs are detached, so generator parameters stay
    frozen for this pass."""
    loss = nn.bce_toward_real(D.forward(source_probs.detach()))
    for k in sorted(target_probs):
        loss = ad.add(loss, nn.bce_toward_fake(D.forward(target_probs[k].detach())))
    return loss


def split_objective(l_seg: Tensor, l_sadv: Tensor | None, lam1: float) -> Tensor:
    if l_sadv is None or lam1 == 0.0:
        return l_seg
    return ad.add(l_seg, ad.scale(l_sadv, lam1))


def stage_rngs(stage_seed: int) -> dict:
    """Named substreams so ablations consume exactly the draws they use."""
    mk = lambda tag: np.random.default_rng(np.random.SeedSequence((stage_seed, tag)))
    return {"g_init": mk(0), "d_init": mk(1), "source": mk(2), "target": mk(3)}


def cluster_members(assignments: np.ndarray, k: int) -> dict:
    return {c: np.flatnonzero(assignments == c) for c in range(k)}


def train_split(
    source_images: np.ndarray,
    source_labels: np.ndarray,
    target_images: np.ndarray,
    assignments: np.ndarray | None,
    cfg,
    stage_seed: int,
    lam1: float | None = None,
):
    """Alternating split-stage training.

    With ``lam1 == 0`` the adversarial path (including its rng draws and the
    discriminator updates) is skipped entirely, which makes the run exactly
    a supervised source-only loop.

    Returns (G, D, rows) where rows carry per-iteration scalars
    (iter, l_seg, l_sadv, l_sd, lr).
    """
    lam1 = cfg.lambda1 if lam1 is None else lam1
    rngs = stage_rngs(stage_seed)
    G = nn.SegNet(
        rngs["g_init"],
        num_classes=cfg.num_classes,
        num_target_banks=cfg.k,
        widths=cfg.segnet_widths,
        bn_momentum=cfg.bn_momentum,
        bn_eps=cfg.bn_eps,
    )
    D = nn.Discriminator(rngs["d_init"], in_channels=cfg.num_classes)

    adversarial = lam1 > 0.0
    members = None
    if adversarial:
        if assignments is None:
            raise TrainError("adversarial split training needs cluster assignments")
        if len(assignments) != len(target_images):
            raise TrainError("every target sample needs a cluster assignment")
        members = cluster_members(np.asarray(assignments), cfg.k)

    sched_g = nn.PolySchedule(cfg.sgd_lr, int(cfg.split_iters * cfg.sched_horizon), cfg.poly_power)
    sched_d = nn.PolySchedule(cfg.adam_lr, int(cfg.split_iters * cfg.sched_horizon), cfg.poly_power)
    opt_g = nn.SgdOptimizer(G.params, cfg.sgd_momentum, cfg.weight_decay)
    opt_d = nn.AdamOptimizer(D.params, cfg.adam_beta1, cfg.adam_beta2)

    g_names = list(G.params)
    d_names = list(D.params)
    n_src = len(source_images)
    rows = []
    for it in range(cfg.split_iters):
        lr_g = sched_g.lr(it)
        lr_d = sched_d.lr(it)

        idx = rngs["source"].integers(0, n_src, size=cfg.source_batch)
        x_s = Tensor(source_images[idx])
        y_s = source_labels[idx]
        src_probs = G.forward(x_s, bank=0, train=True)
        l_seg = nn.seg_cross_entropy(src_probs, y_s)

        l_sadv_val, l_sd_val = 0.0, 0.0
        if adversarial:
            nonempty = [c for c in sorted(members) if len(members[c]) > 0]
            c = nonempty[rngs["target"].integers(0, len(nonempty))]
            pick = rngs["target"].integers(0, len(members[c]), size=cfg.target_batch)
            x_t = Tensor(target_images[members[c][pick]])
            l_sadv, branch_probs = multi_branch_adv_loss(G, D, {c: x_t})
            loss = split_objective(l_seg, l_sadv, lam1)
            l_sadv_val = l_sadv.item()
        else:
            loss = l_seg

        grads = ad.grad(loss, [G.params[n] for n in g_names])
        opt_g.step(dict(zip(g_names, grads)), lr_g)

        if adversarial:
            l_sd = discriminator_loss_split(D, src_probs, branch_probs)
            d_grads = ad.grad(l_sd, [D.params[n] for n in d_names])
            opt_d.step(dict(zip(d_names, d_grads)), lr_d)
            l_sd_val = l_sd.item()

        rows.append(
            {
                "iter": it,
                "l_seg": l_seg.item(),
                "l_sadv": l_sadv_val,
                "l_sd": l_sd_val,
                "lr": lr_g,
            }
        )
    return G, D, rows
