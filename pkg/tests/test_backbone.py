import numpy as np
import pytest

from pfd.backbone import (
    BackboneConfig,
    TokenLayout,
    block_id,
    build_student_mask,
    build_teacher_mask,
    init_params,
    load_checkpoint,
    mot_forward,
    save_checkpoint,
    select_trainable,
)

SMALL = BackboneConfig(frames=4, video_tokens=2, action_tokens=3, frame_dim=8, d_model=16, depth=2)


def _inputs(cfg, rng, batch=2, frames=None):
    frames = frames or cfg.frames
    x = rng.normal(size=(batch, frames, cfg.frame_dim))
    a = rng.normal(size=(batch, cfg.action_tokens, cfg.action_dim))
    x1 = rng.normal(size=(batch, cfg.frame_dim))
    return x, a, x1


def _expected_action_row(allowed, n):
    row = np.zeros(n, dtype=bool)
    row[list(allowed)] = True
    return row


def test_student_mask_enumerated_small_case():
    m = build_student_mask(TokenLayout(3, 2, 2, 8))
    want = _expected_action_row({0, 1, 6, 7}, 8)
    for r in (6, 7):
        assert np.array_equal(m.permit[r], want)
        assert m.permit[r, r]


def test_teacher_mask_enumerated_small_case():
    m = build_teacher_mask(TokenLayout(3, 2, 2, 8))
    for r in (6, 7):
        assert m.permit[r].all()


def test_masks_differ_only_on_action_rows_future_columns():
    lay = TokenLayout(4, 3, 5, 8)
    s, t = build_student_mask(lay), build_teacher_mask(lay)
    diff = t.permit & ~s.permit
    assert not (s.permit & ~t.permit).any()
    expected = np.zeros_like(diff)
    expected[lay.n_video:, lay.video_tokens:lay.n_video] = True
    assert np.array_equal(diff, expected)
    assert np.array_equal(s.video_rows, t.video_rows)


def test_video_rows_never_read_actions_and_are_block_causal():
    lay = TokenLayout(3, 2, 2, 8)
    m = build_student_mask(lay)
    assert not m.permit[:lay.n_video, lay.n_video:].any()
    frame_of = np.repeat(np.arange(3), 2)
    assert np.array_equal(m.video_rows, frame_of[None, :] <= frame_of[:, None])


@pytest.mark.parametrize("v,h", [(1, 1), (2, 2), (4, 8)])
def test_single_frame_masks_are_equal(v, h):
    lay = TokenLayout(1, v, h, 8)
    assert np.array_equal(build_student_mask(lay).permit, build_teacher_mask(lay).permit)


def test_invalid_layout_rejected():
    with pytest.raises(ValueError):
        TokenLayout(0, 2, 2, 8)


def test_forward_shapes_and_determinism():
    p = init_params(SMALL)
    x, a, x1 = _inputs(SMALL, np.random.default_rng(0))
    mask = build_student_mask(SMALL.layout())
    u1, v1 = mot_forward(p, x, a, x1, 0.3, 0.7, mask)
    u2, v2 = mot_forward(p, x, a, x1, 0.3, 0.7, mask)
    assert u1.shape == x.shape and v1.shape == a.shape
    assert u1.data.tobytes() == u2.data.tobytes() and v1.data.tobytes() == v2.data.tobytes()


def test_single_frame_student_equals_teacher_output():
    p = init_params(SMALL)
    x, a, x1 = _inputs(SMALL, np.random.default_rng(1), frames=1)
    lay = SMALL.layout(1)
    _, vs = mot_forward(p, x, a, x1, 0.5, 0.5, build_student_mask(lay))
    _, vt = mot_forward(p, x, a, x1, 0.5, 0.5, build_teacher_mask(lay))
    assert vs.data.tobytes() == vt.data.tobytes()


def test_student_is_future_blind():
    p = init_params(SMALL)
    rng = np.random.default_rng(2)
    x, a, x1 = _inputs(SMALL, rng)
    mask = build_student_mask(SMALL.layout())
    _, v = mot_forward(p, x, a, x1, 0.4, 0.6, mask)
    for _ in range(10):
        xp = x.copy()
        xp[:, 1:] += rng.normal(scale=3.0, size=xp[:, 1:].shape)
        _, vp = mot_forward(p, xp, a, x1, 0.4, 0.6, mask)
        assert vp.data.tobytes() == v.data.tobytes()


def test_teacher_is_future_sensitive():
    p = init_params(SMALL)
    rng = np.random.default_rng(3)
    x, a, x1 = _inputs(SMALL, rng)
    mask = build_teacher_mask(SMALL.layout())
    _, v = mot_forward(p, x, a, x1, 0.4, 0.6, mask)
    changes = []
    for _ in range(10):
        xp = x.copy()
        xp[:, 1:] += rng.normal(size=xp[:, 1:].shape)
        changes.append(np.max(np.abs(mot_forward(p, xp, a, x1, 0.4, 0.6, mask)[1].data - v.data)))
    assert max(changes) > 0


def test_student_and_teacher_differ_at_random_init():
    p = init_params(SMALL)
    x, a, x1 = _inputs(SMALL, np.random.default_rng(4))
    _, vs = mot_forward(p, x, a, x1, 0.5, 0.5, build_student_mask(SMALL.layout()))
    _, vt = mot_forward(p, x, a, x1, 0.5, 0.5, build_teacher_mask(SMALL.layout()))
    assert np.max(np.abs(vs.data - vt.data)) > 0


def test_equal_masks_give_equal_outputs():
    p = init_params(SMALL)
    x, a, x1 = _inputs(SMALL, np.random.default_rng(5))
    m1 = build_teacher_mask(SMALL.layout())
    m2 = build_teacher_mask(SMALL.layout())
    assert mot_forward(p, x, a, x1, 0.2, 0.2, m1)[1].data.tobytes() == \
        mot_forward(p, x, a, x1, 0.2, 0.2, m2)[1].data.tobytes()


def test_forward_rejects_shape_mismatch():
    p = init_params(SMALL)
    x, a, x1 = _inputs(SMALL, np.random.default_rng(6))
    mask = build_student_mask(SMALL.layout())
    with pytest.raises(ValueError):
        mot_forward(p, x[:, :, :5], a, x1, 0.5, 0.5, mask)
    with pytest.raises(ValueError):
        mot_forward(p, x, a[:, :2], x1, 0.5, 0.5, mask)
    with pytest.raises(ValueError):
        mot_forward(p, x, a, x1[:1], 0.5, 0.5, mask)
    with pytest.raises(ValueError):
        mot_forward(p, x[:, :2], a, x1, 0.5, 0.5, mask)


def test_block_counts_match_depth():
    p = init_params(SMALL)
    ids = p.block_ids
    assert sum(i.startswith("video.") for i in ids) == SMALL.depth
    assert sum(i.startswith("action.") for i in ids) == SMALL.depth
    assert block_id("action.1.q.w") == "action.1"
    assert block_id("embed.video_in.w") == "embed"


def test_select_trainable_examples():
    p = init_params(SMALL)
    assert select_trainable(p, 0, 0) == frozenset()
    full = select_trainable(p, SMALL.depth, SMALL.depth)
    assert full == {i for i in p.block_ids if i.split(".")[0] in ("video", "action")}
    assert select_trainable(p, 1, 0) == {"action.1"}
    assert select_trainable(p, 2, 1) == {"action.0", "action.1", "video.1"}


def test_select_trainable_paper_ratio():
    p = init_params(BackboneConfig(depth=30, d_model=8, heads=2))
    chosen = select_trainable(p, 12, 12)
    assert len([b for b in chosen if b.startswith("action.")]) / 30 == pytest.approx(0.4)


def test_select_trainable_partitions_blocks():
    p = init_params(SMALL)
    chosen = select_trainable(p, 1, 2)
    frozen = set(p.block_ids) - chosen
    assert chosen | frozen == set(p.block_ids) and not (chosen & frozen)
    assert "embed" in frozen and "heads" in frozen


@pytest.mark.parametrize("ka,kv", [(-1, 0), (0, 3), (5, 5)])
def test_select_trainable_rejects_out_of_range(ka, kv):
    with pytest.raises(ValueError):
        select_trainable(init_params(SMALL), ka, kv)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    p = init_params(SMALL, seed=9)
    save_checkpoint(tmp_path / "c.ckpt", p, meta={"note": "x"})
    back, extra, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert back.config == p.config and extra == {} and meta["note"] == "x"
    for n, t in p.tensors.items():
        assert back[n].data.tobytes() == t.data.tobytes()
        assert back[n].shape == t.shape


def test_init_is_seeded():
    a, b = init_params(SMALL, seed=1), init_params(SMALL, seed=1)
    c = init_params(SMALL, seed=2)
    assert all(a[n].data.tobytes() == b[n].data.tobytes() for n in a.tensors)
    assert any(a[n].data.tobytes() != c[n].data.tobytes() for n in a.tensors)
