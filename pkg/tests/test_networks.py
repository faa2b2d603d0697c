from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ocssl import autodiff as ad
from ocssl.autodiff import Tensor
from ocssl.errors import IntegrityError, ProtocolError
from ocssl.networks import (
    Learner,
    MissingGradientError,
    Mlp,
    MlpSpec,
    SgdState,
    build_network_set,
    ema_update,
    forward_features,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    snapshot_frozen,
)

FIXTURES = Path(__file__).parent / "fixtures"


def _linear(d, weight, bias):
    m = Mlp(MlpSpec((d, d)))
    m.params["l0.weight"].data = np.asarray(weight, dtype=float)
    m.params["l0.bias"].data = np.asarray(bias, dtype=float)
    return m


def test_identity_encoder_passes_inputs_through():
    enc = _linear(3, np.eye(3), np.zeros(3))
    proj = _linear(3, np.eye(3), np.zeros(3))
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(forward_features(Learner(enc, proj), x).data, x)


def test_zero_weight_encoder_outputs_bias():
    enc = _linear(3, np.zeros((3, 3)), [1.0, 2.0, 3.0])
    proj = _linear(3, np.eye(3), np.zeros(3))
    z = forward_features(Learner(enc, proj), np.ones((4, 3))).data
    np.testing.assert_array_equal(z, np.tile([1.0, 2.0, 3.0], (4, 1)))


def test_forward_matches_golden_fixture():
    x = np.linspace(-1, 1, 32).reshape(4, 8)
    z = forward_features(build_network_set(8, 7).theta, x).data
    np.testing.assert_array_equal(z, np.load(FIXTURES / "forward_seed7_d8.npy"))


def test_width_mismatch_and_bad_specs():
    nets = build_network_set(8, 0)
    with pytest.raises(ad.ShapeError):
        forward_features(nets.theta, np.ones((2, 5)))
    with pytest.raises(ValueError):
        MlpSpec((4,))
    with pytest.raises(ValueError):
        MlpSpec((4, 0))


def test_default_architecture():
    nets = build_network_set(32, 0)
    assert nets.theta.encoder.spec.layer_widths == (32, 128, 128)
    assert nets.theta.projector.spec.layer_widths == (128, 64)
    assert nets.predictor.spec.layer_widths == (64, 32, 64)
    assert nets.align_proj.spec.layer_widths == (64, 64, 64)
    assert nets.align_proj.spec.in_width == nets.align_proj.spec.out_width == nets.theta.feature_width


# -- EMA -------------------------------------------------------------------------------------------


def _pair(p_theta, p_ema):
    theta = Learner(_linear(1, [[p_theta]], [0.0]), _linear(1, [[p_theta]], [0.0]))
    ema = theta.copy(trainable=False)
    for _, p in ema.named_params():
        p.data = np.full(p.shape, float(p_ema))
    return theta, ema


def test_ema_update_examples():
    theta, ema = _pair(1.0, 0.0)
    ema_update(theta, ema, 1.0)
    assert all(np.all(p.data == 0.0) for _, p in ema.named_params())
    ema_update(theta, ema, 0.999)
    assert ema.encoder.params["l0.weight"].data[0, 0] == pytest.approx(0.001, abs=1e-15)
    ema_update(theta, ema, 0.0)
    for (_, a), (_, b) in zip(theta.named_params(), ema.named_params()):
        np.testing.assert_array_equal(a.data, b.data)


def test_ema_rejects_bad_tau():
    theta, ema = _pair(1.0, 0.0)
    with pytest.raises(ValueError):
        ema_update(theta, ema, 1.5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 40))
def test_ema_closed_form_and_contraction(tau, n):
    nets = build_network_set(4, 1, ema=True)
    rng = np.random.default_rng(0)
    for _, p in nets.ema_theta.named_params():
        p.data = rng.standard_normal(p.shape)
    start = {k: p.data.copy() for k, p in nets.ema_theta.named_params()}
    theta = dict(nets.theta.named_params())
    prev = start
    for _ in range(n):
        ema_update(nets.theta, nets.ema_theta, tau)
        cur = {k: p.data.copy() for k, p in nets.ema_theta.named_params()}
        for k in cur:
            np.testing.assert_allclose(np.abs(cur[k] - theta[k].data), tau * np.abs(prev[k] - theta[k].data),
                                       atol=1e-12)
        prev = cur
    for k, p in nets.ema_theta.named_params():
        np.testing.assert_allclose(p.data, theta[k].data + tau ** n * (start[k] - theta[k].data), atol=1e-10)


# -- SGD ----------------------------------------------------------------------------------------------


def test_sgd_single_step():
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    sgd_step({"p": p}, SgdState(0.1, momentum=0.0, weight_decay=0.0))
    np.testing.assert_allclose(p.data, [-0.1])
    assert p.grad is None


def test_sgd_momentum_accumulates():
    p = Tensor([0.0], requires_grad=True)
    state = SgdState(0.1, momentum=0.9, weight_decay=0.0)
    p.grad = np.array([2.0])
    sgd_step({"p": p}, state)
    before = p.data.copy()
    p.grad = np.array([2.0])
    sgd_step({"p": p}, state)
    np.testing.assert_allclose(before - p.data, 0.1 * 1.9 * 2.0)


def test_sgd_weight_decay_is_coupled():
    p = Tensor([2.0], requires_grad=True)
    p.grad = np.array([0.0])
    sgd_step({"p": p}, SgdState(0.5, momentum=0.0, weight_decay=0.1))
    np.testing.assert_allclose(p.data, [2.0 - 0.5 * 0.2])


def test_sgd_quadratic_bowl_converges():
    target = np.array([1.5, -2.0, 0.25])
    p = Tensor(np.zeros(3), requires_grad=True)
    state = SgdState(0.5, momentum=0.5, weight_decay=0.0)
    for _ in range(200):
        diff = ad.sub(p, Tensor(target))
        ad.scale(ad.tsum(ad.mul(diff, diff)), 0.5).backward()
        sgd_step({"p": p}, state)
    assert np.max(np.abs(p.data - target)) < 1e-6


def test_sgd_missing_gradient():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(MissingGradientError):
        sgd_step({"p": p}, SgdState(0.1))
    sgd_step({"p": p}, SgdState(0.1), skip_missing=True)
    assert p.data[0] == 1.0


def test_sgd_state_validation():
    with pytest.raises(ValueError):
        SgdState(0.0)
    with pytest.raises(ValueError):
        SgdState(0.1, momentum=1.0)


# -- snapshots --------------------------------------------------------------------------------------


def _train_steps(nets, rng, k):
    state = SgdState(0.05)
    for _ in range(k):
        z = nets.theta(Tensor(rng.standard_normal((8, 6))))
        ad.mean(ad.mul(z, z)).backward()
        sgd_step(dict((f"theta/{n}", p) for n, p in nets.theta.named_params()), state)


def test_snapshot_is_constant_and_equal_at_creation():
    rng = np.random.default_rng(0)
    nets = build_network_set(6, 0)
    frozen = snapshot_frozen(nets.theta, boundaries_visible=True)
    x = Tensor(rng.standard_normal((5, 6)))
    np.testing.assert_array_equal(frozen(x, track=False).data, nets.theta(x, track=False).data)
    before = frozen(x, training=False).data.copy()
    _train_steps(nets, rng, 10)
    np.testing.assert_array_equal(frozen(x, training=False).data, before)
    assert all(p.grad is None and not p.requires_grad for _, p in frozen.named_params())


def test_snapshot_needs_visible_boundaries():
    with pytest.raises(ProtocolError):
        snapshot_frozen(build_network_set(4, 0).theta, boundaries_visible=False)


# -- checkpoints ---------------------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    nets = build_network_set(6, 3, ema=True)
    nets.frozen_theta = snapshot_frozen(nets.theta, True)
    _train_steps(nets, rng, 3)
    state = SgdState(0.05)
    state.velocity = {"theta/encoder/l0.weight": rng.standard_normal((6, 128))}
    path = tmp_path / "a.ckpt"
    save_checkpoint(nets, path, state, {"note": "x"}, {"extra": np.arange(3.0)})
    ck = load_checkpoint(path)
    for k, v in nets.arrays().items():
        np.testing.assert_array_equal(ck.nets.arrays()[k], v)
    np.testing.assert_array_equal(ck.sgd.velocity["theta/encoder/l0.weight"], state.velocity["theta/encoder/l0.weight"])
    assert ck.meta == {"note": "x"}
    x = Tensor(rng.standard_normal((4, 6)))
    np.testing.assert_array_equal(ck.nets.theta(x, training=False).data, nets.theta(x, training=False).data)


def test_truncated_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(build_network_set(4, 0), path)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(IntegrityError):
        load_checkpoint(path)
    flipped = bytearray(blob)
    flipped[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_align_projector_gets_gradient_only_from_alignment():
    from ocssl.alignment import cla_b_reg
    from ocssl.ssl_objectives import ViewPair, simsiam_loss

    rng = np.random.default_rng(0)
    nets = build_network_set(6, 0, ema=True)
    x1, x2 = rng.standard_normal((8, 6)), rng.standard_normal((8, 6))
    z1, z2 = nets.theta(Tensor(x1)), nets.theta(Tensor(x2))
    simsiam_loss(ViewPair(z1, z2), nets.predictor).backward()
    assert all(p.grad is None for p in nets.align_proj.params.values())
    z1, z2 = nets.theta(Tensor(x1)), nets.theta(Tensor(x2))
    cla_b_reg(z1, z2, nets.align_proj, nets.ema_theta, x1, x2).backward()
    assert all(p.grad is not None and np.any(p.grad != 0) for p in nets.align_proj.params.values())
