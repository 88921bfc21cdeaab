"""Layer, loss, and optimizer tests, including the normalization-bank contracts."""

import math

import numpy as np
import pytest

from metadapt import autodiff as ad
from metadapt import nn
from metadapt.checkpoint import load_container, save_container

from gradcheck import check_op_gradient, random_cotangent, weighted_sum


def make_segnet(seed=0, banks=4):
    return nn.SegNet(np.random.default_rng(seed), num_target_banks=banks)


def make_cdbn(channels=3, banks=2, momentum=0.1):
    layer = nn.CdbnLayer("bn", channels, banks, momentum=momentum)
    params = {}
    layer.init_params(params)
    return layer, params


# -- cdbn ------------------------------------------------------------------------


def test_cdbn_train_normalizes_batch():
    layer, params = make_cdbn(channels=3)
    rng = np.random.default_rng(1)
    # batch variance must exceed ~10 so the eps term biases the normalized
    # variance by less than the 1e-6 tolerance: |1 - v/(v+eps)| = eps/(v+eps)
    x = ad.Tensor(rng.normal(2.0, 5.0, size=(8, 3, 5, 5)))
    out = layer.forward(x, bank=0, train=True, params=params)
    mu = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.all(np.abs(mu) < 1e-9)
    assert np.all(np.abs(var - 1.0) < 1e-6)


def test_cdbn_affine_applies_gamma_beta():
    layer, params = make_cdbn(channels=2)
    params["bn.bank0.gamma"] = ad.Tensor(np.full(2, 2.0), requires_grad=True)
    params["bn.bank0.beta"] = ad.Tensor(np.full(2, 3.0), requires_grad=True)
    rng = np.random.default_rng(2)
    x = ad.Tensor(rng.normal(0.0, 5.0, size=(16, 2, 4, 4)))
    out = layer.forward(x, bank=0, train=True, params=params)
    assert np.all(np.abs(out.data.mean(axis=(0, 2, 3)) - 3.0) < 1e-9)
    assert np.all(np.abs(out.data.std(axis=(0, 2, 3)) - 2.0) < 1e-5)


def test_cdbn_running_stats_follow_ema_recursion():
    mom = 0.1
    layer, params = make_cdbn(channels=1, banks=2, momentum=mom)
    rng = np.random.default_rng(3)
    batch_a = [rng.normal(5.0, 1.0, size=(4, 1, 3, 3)) for _ in range(6)]
    batch_b = [rng.normal(-2.0, 0.5, size=(4, 1, 3, 3)) for _ in range(6)]

    # independent EMA recursion, computed outside the layer
    exp_m1, exp_m2 = 0.0, 0.0
    for a in batch_a:
        exp_m1 = (1 - mom) * exp_m1 + mom * a.mean()
    for b in batch_b:
        exp_m2 = (1 - mom) * exp_m2 + mom * b.mean()

    for a in batch_a:
        layer.forward(ad.Tensor(a), bank=1, train=True, params=params)
    for b in batch_b:
        layer.forward(ad.Tensor(b), bank=2, train=True, params=params)

    assert abs(layer.running_mean[1][0] - exp_m1) < 1e-12
    assert abs(layer.running_mean[2][0] - exp_m2) < 1e-12
    # bank 0 untouched
    assert layer.running_mean[0][0] == 0.0 and layer.running_var[0][0] == 1.0


def test_cdbn_bank_isolation_hashes():
    layer, params = make_cdbn(channels=2, banks=3)
    before = {b: layer.bank_hash(b, params) for b in range(4)}
    x = ad.Tensor(np.random.default_rng(4).normal(size=(4, 2, 3, 3)))
    layer.forward(x, bank=2, train=True, params=params)
    after = {b: layer.bank_hash(b, params) for b in range(4)}
    assert before[2] != after[2]
    for b in (0, 1, 3):
        assert before[b] == after[b]


def test_cdbn_errors():
    layer, params = make_cdbn(channels=2, banks=1)
    x = ad.Tensor(np.zeros((4, 2, 3, 3)))
    with pytest.raises(nn.NnError, match="bank"):
        layer.forward(x, bank=5, train=False, params=params)
    with pytest.raises(nn.NnError, match="batch"):
        layer.forward(ad.Tensor(np.zeros((1, 2, 3, 3))), bank=0, train=True, params=params)


def test_cdbn_train_gradient_through_batch_stats():
    layer, params = make_cdbn(channels=2, banks=0)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 2, 2, 2))
    cot = random_cotangent((3, 2, 2, 2), rng)

    def build(ps):
        p = {"bn.bank0.gamma": ps[1], "bn.bank0.beta": ps[2]}
        fresh = nn.CdbnLayer("bn", 2, 0)
        return weighted_sum(fresh.forward(ps[0], 0, True, p), cot)

    check_op_gradient(build, [x, rng.normal(size=2), rng.normal(size=2)])


def test_cdbn_eval_uses_running_stats():
    layer, params = make_cdbn(channels=1, banks=0)
    layer.running_mean[0][:] = 4.0
    layer.running_var[0][:] = 9.0
    x = ad.Tensor(np.full((2, 1, 2, 2), 7.0))
    out = layer.forward(x, bank=0, train=False, params=params)
    expect = (7.0 - 4.0) / np.sqrt(9.0 + layer.eps)
    assert np.all(np.abs(out.data - expect) < 1e-12)


# -- segnet / discriminator --------------------------------------------------------


def test_segnet_outputs_pixel_simplex_every_bank():
    net = make_segnet(seed=7)
    x = np.random.default_rng(8).random((2, 3, 8, 8))
    for bank in range(net.num_target_banks + 1):
        probs = net.forward(x, bank=bank, train=False)
        assert probs.shape == (2, net.num_classes, 8, 8)
        sums = probs.data.sum(axis=1)
        assert np.all(np.abs(sums - 1.0) < 1e-9)
        assert np.all(probs.data > 0)


def test_segnet_override_params_change_output():
    net = make_segnet(seed=9)
    x = np.random.default_rng(10).random((2, 3, 8, 8))
    base = net.forward(x, bank=0).data
    tweak = {"head.bias": ad.Tensor(net.params["head.bias"].data + 1.0)}
    alt = net.forward(x, bank=0, override=tweak).data
    assert not np.array_equal(base, alt)
    # the stored parameters were not modified
    again = net.forward(x, bank=0).data
    assert np.array_equal(base, again)


def test_discriminator_output_open_interval():
    d = nn.Discriminator(np.random.default_rng(11), in_channels=4)
    x = np.random.default_rng(12).random((2, 4, 8, 8))
    out = d.forward(ad.Tensor(x))
    assert out.shape == (2, 1, 2, 2)  # two stride-2 stages
    assert np.all(out.data > 0.0) and np.all(out.data < 1.0)


# -- losses -------------------------------------------------------------------------


def test_cross_entropy_perfect_prediction():
    probs = np.full((1, 2, 2, 2), 1e-12)
    labels = np.zeros((1, 2, 2), dtype=int)
    probs[:, 0] = 1.0 - 1e-12
    loss = nn.seg_cross_entropy(ad.Tensor(probs), labels)
    assert loss.item() < 1e-11


def test_cross_entropy_uniform_is_log_m():
    m = 4
    probs = np.full((2, m, 3, 3), 1.0 / m)
    labels = np.random.default_rng(13).integers(0, m, size=(2, 3, 3))
    loss = nn.seg_cross_entropy(ad.Tensor(probs), labels)
    assert abs(loss.item() - math.log(m)) < 1e-9


def test_cross_entropy_hand_case():
    # two pixels, true-class probabilities 0.9 and 0.5
    probs = np.array([[[[0.9, 0.5]], [[0.1, 0.5]]]])  # (1, 2, 1, 2)
    labels = np.zeros((1, 1, 2), dtype=int)
    loss = nn.seg_cross_entropy(ad.Tensor(probs), labels)
    expect = -(math.log(0.9) + math.log(0.5)) / 2
    assert abs(loss.item() - expect) < 1e-12


def test_cross_entropy_rejects_bad_labels():
    probs = ad.Tensor(np.full((1, 3, 2, 2), 1 / 3))
    labels = np.full((1, 2, 2), 3)
    with pytest.raises(nn.NnError, match="labels"):
        nn.seg_cross_entropy(probs, labels)


def test_bce_halves_give_log2():
    d = ad.Tensor(np.full((2, 1, 4, 4), 0.5))
    assert abs(nn.bce_toward_real(d).item() - math.log(2)) < 1e-12
    assert abs(nn.bce_toward_fake(d).item() - math.log(2)) < 1e-12


# -- optimizers ----------------------------------------------------------------------


def test_sgd_zero_grad_zero_decay_is_identity():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = nn.SgdOptimizer({"p": p}, momentum=0.9, weight_decay=0.0)
    opt.step({"p": np.zeros(2)}, lr=0.1)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_sgd_single_step_plain():
    p = ad.Tensor(np.array([1.0]), requires_grad=True)
    opt = nn.SgdOptimizer({"p": p}, momentum=0.5, weight_decay=0.0)
    opt.step({"p": np.array([2.0])}, lr=0.1)
    assert np.allclose(p.data, [1.0 - 0.1 * 2.0])


def test_sgd_two_steps_momentum_unrolled():
    # mu=0.9, lr=0.1, constant gradient 1, p0=0: p2 = -0.1 - 0.19 = -0.29
    p = ad.Tensor(np.array([0.0]), requires_grad=True)
    opt = nn.SgdOptimizer({"p": p}, momentum=0.9, weight_decay=0.0)
    opt.step({"p": np.array([1.0])}, lr=0.1)
    opt.step({"p": np.array([1.0])}, lr=0.1)
    assert abs(p.data[0] - (-0.29)) < 1e-15


def test_adam_zero_grad_is_identity():
    p = ad.Tensor(np.array([3.0]), requires_grad=True)
    opt = nn.AdamOptimizer({"p": p})
    opt.step({"p": np.array([0.0])}, lr=0.1)
    assert np.array_equal(p.data, [3.0])


def test_adam_first_step_is_sign_scaled():
    for g in (0.3, -7.0, 2e-3):
        p = ad.Tensor(np.array([0.0]), requires_grad=True)
        opt = nn.AdamOptimizer({"p": p})
        opt.step({"p": np.array([g])}, lr=0.01)
        expect = -0.01 * g / (abs(g) + opt.eps)
        assert abs(p.data[0] - expect) < 1e-12


def test_adam_constant_gradient_step_size_approaches_lr():
    p = ad.Tensor(np.array([0.0]), requires_grad=True)
    opt = nn.AdamOptimizer({"p": p})
    prev = p.data[0]
    for _ in range(300):
        prev = p.data[0]
        opt.step({"p": np.array([1.0])}, lr=0.01)
    assert abs(abs(p.data[0] - prev) - 0.01) < 1e-6


def test_poly_schedule_values():
    sched = nn.PolySchedule(2.5e-4, max_iter=1000, power=0.9)
    assert sched.lr(0) == 2.5e-4
    assert sched.lr(1000) == 0.0
    assert abs(sched.lr(500) - 2.5e-4 * 0.5**0.9) < 1e-12
    assert abs(sched.lr(500) - 1.3397e-4) < 1e-8
    lrs = [sched.lr(i) for i in range(0, 1001, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_optimizer_trajectory_reproducible():
    def run():
        rng = np.random.default_rng(14)
        p = ad.Tensor(rng.normal(size=4), requires_grad=True)
        opt = nn.SgdOptimizer({"p": p})
        for _ in range(20):
            g = rng.normal(size=4)
            opt.step({"p": g}, lr=1e-2)
        return p.data.copy()

    assert np.array_equal(run(), run())


# -- checkpoint container --------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    net = make_segnet(seed=15)
    path = tmp_path / "model.ckpt"
    manifest = {"stage": "split", "iteration": 7, "m": 4, "k": 4,
                "layers": sorted(net.state_arrays())}
    save_container(path, manifest, net.state_arrays())
    got_manifest, arrays = load_container(path)
    assert got_manifest["iteration"] == 7 and got_manifest["stage"] == "split"

    other = make_segnet(seed=99)
    other.load_state_arrays(arrays)
    x = np.random.default_rng(16).random((2, 3, 8, 8))
    a = net.forward(x, bank=1).data
    b = other.forward(x, bank=1).data
    assert np.array_equal(a, b)


def test_checkpoint_bytes_deterministic(tmp_path):
    net = make_segnet(seed=17)
    m = {"stage": "split", "iteration": 0, "m": 4, "k": 4, "layers": []}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_container(p1, m, net.state_arrays())
    save_container(p2, m, net.state_arrays())
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a container")
    from metadapt.checkpoint import CheckpointError

    with pytest.raises(CheckpointError, match="magic"):
        load_container(p)
