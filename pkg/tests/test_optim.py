import math

import numpy as np
import pytest

from cacl.encoders import EncoderConfig, Cnn3dEncoder, MomentumEncoder, momentum_update
from cacl.nn import MLP, Linear
from cacl.optim import SGD, MissingGradient, OptimizerState, cosine_lr, sgd_step
from cacl.tensor import Tensor


def test_cosine_schedule_endpoints():
    assert cosine_lr(0.1, 0, 10) == pytest.approx(0.1)
    assert cosine_lr(0.1, 5, 10) == pytest.approx(0.05)
    assert cosine_lr(0.1, 10, 10) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(0.1, 0, 0)


def test_sgd_matches_hand_recursion():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=(3,)), requires_grad=True)
    p0 = p.data.copy()
    grads = [rng.normal(size=3) for _ in range(4)]
    state = OptimizerState(base_lr=0.1, momentum=0.9, weight_decay=0.01, total_epochs=4)
    expect, buf = p0.copy(), None
    for epoch, g in enumerate(grads):
        state.epoch = epoch
        p.grad = g
        sgd_step([("p", p)], state)
        d = g + 0.01 * expect
        buf = d if buf is None else 0.9 * buf + d
        expect = expect - 0.1 * 0.5 * (1 + math.cos(math.pi * epoch / 4)) * buf
        np.testing.assert_allclose(p.data, expect, rtol=0, atol=1e-15)


def test_sgd_requires_gradients():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = SGD([("p", p)], 0.1)
    with pytest.raises(MissingGradient):
        opt.step()


def test_momentum_update_exact():
    rng = np.random.default_rng(1)
    online = Cnn3dEncoder(EncoderConfig(clip_len=4, crop=8, trunk_channels=(2, 2), feature_dim=4,
                                        embed_dim=3, head_hidden=4), rng)
    target = MomentumEncoder(online)
    for p in online.parameters():
        p.data = p.data + rng.normal(size=p.shape)
    before = {n: p.data.copy() for n, p in target.named_parameters()}
    source = dict(online.named_parameters())
    alpha = 0.73
    momentum_update(online, target, alpha)
    for name, p in target.named_parameters():
        np.testing.assert_array_equal(p.data, alpha * before[name] + (1 - alpha) * source[name].data)
    assert not any(p.requires_grad for p in target.parameters())
    with pytest.raises(ValueError):
        momentum_update(online, target, 1.0)


def test_momentum_update_structure_mismatch():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        momentum_update(Linear(3, 2, rng), MLP(3, 4, 2, rng), 0.9)


def test_module_state_round_trip_and_freeze():
    rng = np.random.default_rng(3)
    a, b = MLP(3, 4, 2, rng), MLP(3, 4, 2, rng)
    b.load_state_dict(a.state_dict())
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    b.freeze()
    assert b.named_trainable_parameters() == []
    with pytest.raises(KeyError):
        b.load_state_dict({"fc1.weight": np.zeros((4, 3))})
