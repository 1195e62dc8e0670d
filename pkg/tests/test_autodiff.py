import zlib

import numpy as np
import pytest

from pfd import autodiff as ad
from pfd.autodiff import Tensor, Tape, backward, stop_gradient

from gradcases import CASES, check_case
from oracles import central_difference, relative_error


def test_square_gradient():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    assert backward(loss, tape)[x.id][0] == 6.0
    assert x.grad[0] == 6.0


def test_matrix_vector_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    w0, v0 = rng.normal(size=(4, 4)), rng.normal(size=(4, 1))
    w, v = Tensor(w0.copy(), requires_grad=True), Tensor(v0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = (w @ v).sum()
    g = backward(loss, tape)
    gw, gv = central_difference(lambda a, b: float((a @ b).sum()), [w0.copy(), v0.copy()])
    assert relative_error(g[w.id], gw) <= 1e-6
    assert relative_error(g[v.id], gv) <= 1e-6


def test_detached_factor_contributes_nothing():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        loss = (stop_gradient(x) * x).sum()
    assert backward(loss, tape)[x.id][0] == 2.0


def test_stop_gradient_is_identity_on_values():
    t = Tensor([1.5, -2.0], requires_grad=True)
    s = stop_gradient(t)
    assert s.data.tolist() == [1.5, -2.0]
    assert not s.requires_grad


def test_sum_of_detached_gives_no_gradient():
    t = Tensor([1.5, -2.0], requires_grad=True)
    u = Tensor([1.0, 1.0], requires_grad=True)
    with Tape() as tape:
        loss = (stop_gradient(t) + u).sum()
    grads = backward(loss, tape)
    assert t.id not in grads
    assert u.id in grads


def test_detachment_equals_constant_leaf():
    rng = np.random.default_rng(1)
    x0 = rng.normal(size=5)

    def run(detach):
        x = Tensor(x0.copy(), requires_grad=True)
        with Tape() as tape:
            y = ad.silu(x)
            z = stop_gradient(y) if detach else Tensor(y.data.copy())
            loss = ad.mse(y * z, x)
        return backward(loss, tape)[x.id]

    assert np.array_equal(run(True), run(False))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        backward(y, tape)


def test_backward_rejects_foreign_tensor():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = x.sum()
    with Tape() as other:
        pass
    with pytest.raises(ValueError, match="tape"):
        backward(y, other)


def test_tape_records_in_topological_order():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.silu(x * 2.0)
        loss = y.sum()
    seen = set()
    for rec in tape.records:
        for t in rec.inputs:
            assert t.id in seen or not tape.produced(t)
        seen.add(rec.output.id)
    assert tape.records[-1].output is loss


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape, ad.no_grad():
        y = (x * x).sum()
    assert not tape.records and not y.requires_grad


def test_masked_softmax_uniform():
    p = ad.masked_softmax(Tensor(np.zeros((1, 4))), np.ones((1, 4), bool))
    assert np.allclose(p.data, 0.25)


def test_masked_softmax_single_permitted_key():
    mask = np.eye(3, dtype=bool)
    p = ad.masked_softmax(Tensor(np.random.default_rng(2).normal(size=(3, 3))), mask)
    assert np.array_equal(p.data, np.eye(3))


def test_masked_softmax_rows_sum_to_one_and_zero_outside():
    rng = np.random.default_rng(3)
    mask = rng.random((6, 7)) < 0.5
    mask[:, 0] = True
    p = ad.masked_softmax(Tensor(rng.normal(size=(2, 6, 7)) * 30), mask).data
    assert np.all(p[:, ~mask] == 0.0)
    assert np.all(np.abs(p.sum(-1) - 1.0) <= 1e-12)


def test_masked_softmax_rejects_empty_row():
    mask = np.ones((2, 3), bool)
    mask[1] = False
    with pytest.raises(ValueError, match="no permitted key"):
        ad.masked_softmax(Tensor(np.zeros((2, 3))), mask)


def test_sinusoidal_embed_at_zero():
    assert ad.sinusoidal_embed(0.0, 4).tolist() == [0.0, 0.0, 1.0, 1.0]


def test_sinusoidal_embed_deterministic_and_bounded():
    assert np.array_equal(ad.sinusoidal_embed(0.5, 8), ad.sinusoidal_embed(0.5, 8))
    for tau in np.linspace(0, 1, 11):
        assert np.all(np.abs(ad.sinusoidal_embed(tau, 8)) <= 1.0)


def test_sinusoidal_embed_rejects_odd_dim():
    with pytest.raises(ValueError):
        ad.sinusoidal_embed(0.3, 5)


def test_zero_init_linear():
    blk = ad.linear_zero_init(7, 2)
    assert not blk.weight.data.any() and not blk.bias.data.any()
    out = blk(Tensor(np.random.default_rng(4).normal(size=(3, 7))))
    assert np.array_equal(out.data, np.zeros((3, 2)))


def test_zero_init_linear_still_receives_gradient():
    blk = ad.linear_zero_init(3, 2)
    blk.weight.requires_grad = True
    x = Tensor(np.array([[1.0, -2.0, 0.5]]))
    with Tape() as tape:
        loss = ad.mse(blk(x), np.array([[1.0, 1.0]]))
    g = backward(loss, tape)[blk.weight.id]
    assert np.abs(g).max() > 0


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(10):
        assert check_case(name, rng) <= 1e-6


def test_determinism():
    def run():
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        g, b = Tensor(np.ones(6), requires_grad=True), Tensor(np.zeros(6))
        with Tape() as tape:
            loss = ad.mse(ad.silu(ad.layer_norm(x, g, b)), np.ones((4, 6)))
        grads = backward(loss, tape)
        return loss.data.copy(), grads[x.id], grads[g.id]

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
