import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asmg.autodiff import Tape
from asmg.base_model import standard_layout
from asmg.errors import DataError
from asmg.metagen import (
    GroupMap,
    GruGroupParams,
    HiddenStore,
    build_group_map,
    generate,
    gru_step,
    init_linear,
    init_meta,
    linear_combine,
    linear_combine_nodes,
    load_linear,
    load_meta,
    meta_leaves,
    readout,
    rollout_nodes,
    save_linear,
    save_meta,
    stacked_readout,
    stacked_step,
    zero_hidden,
)


def layout_of(n_users=6, n_items=9, embed_dim=3, hidden=(4,)):
    return standard_layout({"user": n_users, "item": n_items}, embed_dim, hidden)


def scalar_oracle_step(w_r, w_z, w_h, h_prev, theta):
    """Independent re-implementation with python loops and math.exp."""
    d = len(h_prev)

    def sig(v):
        return 1.0 / (1.0 + math.exp(-v))

    x = list(h_prev) + [theta]
    r = [sig(sum(w_r[i][j] * x[j] for j in range(d + 1))) for i in range(d)]
    z = [sig(sum(w_z[i][j] * x[j] for j in range(d + 1))) for i in range(d)]
    xh = [r[i] * h_prev[i] for i in range(d)] + [theta]
    h_til = [math.tanh(sum(w_h[i][j] * xh[j] for j in range(d + 1))) for i in range(d)]
    return [(1.0 - z[i]) * h_prev[i] + z[i] * h_til[i] for i in range(d)]


# ----------------------------------------------------------------------
# group map


def test_group_counts_follow_sharing_rule():
    layout = layout_of(n_users=1000, n_items=50, embed_dim=4, hidden=(5,))
    gm = build_group_map(layout)
    mlp_scalars = sum(
        int(np.prod(shape)) for name, shape, _ in layout.segments() if name.startswith("mlp:")
    )
    n_features = len(layout.features)
    assert gm.n_groups == n_features * 4 + mlp_scalars
    # embedding group count ignores vocab size entirely
    small = build_group_map(layout_of(n_users=3, n_items=50, embed_dim=4, hidden=(5,)))
    assert small.n_groups == gm.n_groups


def test_two_features_d8_give_16_embedding_groups():
    a = standard_layout({"user": 100, "item": 7}, embed_dim=8, hidden_sizes=())
    b = standard_layout({"user": 9999, "item": 123}, embed_dim=8, hidden_sizes=())
    for layout in (a, b):
        gm = build_group_map(layout)
        emb_groups = [n for n in gm.group_names if n.startswith("emb:user") or n.startswith("emb:item")]
        assert len(emb_groups) == 16


def test_group_map_is_a_partition():
    layout = layout_of()
    gm = build_group_map(layout)
    assert gm.coord_group.size == layout.n_params
    assert gm.coord_group.min() == 0
    assert gm.coord_group.max() == gm.n_groups - 1
    assert gm.group_sizes().sum() == layout.n_params
    # every group referenced at least once
    assert np.all(gm.group_sizes() > 0)


def test_embedding_groups_span_rows_mlp_groups_are_scalars():
    layout = layout_of(n_users=4, n_items=5, embed_dim=2, hidden=())
    gm = build_group_map(layout)
    sizes = gm.group_sizes()
    for name, shape, offset in layout.segments():
        if name.startswith("emb:"):
            rows, dim = shape
            block = gm.coord_group[offset : offset + rows * dim].reshape(rows, dim)
            # same group all the way down each column
            for e in range(dim):
                assert len(set(block[:, e])) == 1
                assert sizes[block[0, e]] == rows
        else:
            block = gm.coord_group[offset : offset + int(np.prod(shape))]
            assert len(set(block.tolist())) == block.size


def test_meta_size_independent_of_vocab():
    gm_small = build_group_map(layout_of(n_users=5, n_items=4))
    gm_big = build_group_map(layout_of(n_users=5000, n_items=4000))
    meta_small = init_meta(gm_small, d=4, k=3, seed=0)
    meta_big = init_meta(gm_big, d=4, k=3, seed=0)
    assert meta_small.n_learnable() == meta_big.n_learnable()


# ----------------------------------------------------------------------
# cell ops


def test_zero_weights_halve_hidden_state():
    d = 3
    g = GruGroupParams(
        w_r=np.zeros((d, d + 1)), w_z=np.zeros((d, d + 1)), w_h=np.zeros((d, d + 1)),
        w_out=np.zeros(d), b_out=0.0,
    )
    h_prev = np.array([0.4, -0.2, 1.0])
    np.testing.assert_allclose(gru_step(g, h_prev, theta=7.3), 0.5 * h_prev, atol=1e-15)
    np.testing.assert_array_equal(gru_step(g, np.zeros(d), theta=-2.0), np.zeros(d))


def test_gru_step_matches_scalar_oracle():
    rng = np.random.default_rng(21)
    for trial in range(1000):
        d = int(rng.integers(1, 5))
        g = GruGroupParams(
            w_r=rng.normal(size=(d, d + 1)),
            w_z=rng.normal(size=(d, d + 1)),
            w_h=rng.normal(size=(d, d + 1)),
            w_out=rng.normal(size=d),
            b_out=float(rng.normal()),
        )
        h_prev = rng.uniform(-1, 1, size=d)
        theta = float(rng.normal())
        got = gru_step(g, h_prev, theta)
        want = scalar_oracle_step(g.w_r.tolist(), g.w_z.tolist(), g.w_h.tolist(), h_prev.tolist(), theta)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_readout_constants():
    g = GruGroupParams(
        w_r=np.zeros((2, 3)), w_z=np.zeros((2, 3)), w_h=np.zeros((2, 3)),
        w_out=np.zeros(2), b_out=1.5,
    )
    assert readout(g, np.array([10.0, -3.0])) == 1.5
    g2 = GruGroupParams(
        w_r=np.zeros((2, 3)), w_z=np.zeros((2, 3)), w_h=np.zeros((2, 3)),
        w_out=np.array([2.0, -1.0]), b_out=0.25,
    )
    assert readout(g2, np.zeros(2)) == 0.25
    h = np.array([0.3, 0.7])
    assert readout(g2, h) == pytest.approx(2.0 * 0.3 - 0.7 + 0.25, abs=1e-15)


def test_stacked_step_matches_reference():
    layout = layout_of()
    gm = build_group_map(layout)
    meta = init_meta(gm, d=4, k=2, seed=3)
    rng = np.random.default_rng(0)
    n = gm.n_coords
    h_prev = rng.uniform(-0.9, 0.9, size=(n, 4))
    theta = rng.normal(size=n)
    stacked = stacked_step(meta, gm.coord_group, h_prev, theta)
    for c in rng.integers(0, n, size=25):
        ref = gru_step(meta.group(int(gm.coord_group[c])), h_prev[c], float(theta[c]))
        np.testing.assert_allclose(stacked[c], ref, atol=1e-14)
    outs = stacked_readout(meta, gm.coord_group, stacked, theta)
    for c in rng.integers(0, n, size=25):
        assert outs[c] == pytest.approx(readout(meta.group(int(gm.coord_group[c])), stacked[c]), abs=1e-14)


@given(st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_hidden_state_stays_bounded(seed):
    # strictly inside (-1, 1) while pre-activations stay below tanh's
    # float64 saturation point (~19); never outside [-1, 1] regardless
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    g = GruGroupParams(
        w_r=rng.uniform(-1.5, 1.5, size=(d, d + 1)),
        w_z=rng.uniform(-1.5, 1.5, size=(d, d + 1)),
        w_h=rng.uniform(-1.5, 1.5, size=(d, d + 1)),
        w_out=rng.normal(size=d),
        b_out=0.0,
    )
    h = rng.uniform(-1 + 1e-9, 1 - 1e-9, size=d)
    for _ in range(4):
        h = gru_step(g, h, float(rng.uniform(-2.0, 2.0)))
        assert np.all(np.abs(h) < 1.0)
    wild = GruGroupParams(
        w_r=rng.normal(scale=50.0, size=(d, d + 1)),
        w_z=rng.normal(scale=50.0, size=(d, d + 1)),
        w_h=rng.normal(scale=50.0, size=(d, d + 1)),
        w_out=g.w_out,
        b_out=0.0,
    )
    h2 = gru_step(wild, h, float(rng.normal(scale=30.0)))
    assert np.all(np.abs(h2) <= 1.0)


# ----------------------------------------------------------------------
# generate


def test_generate_single_step_equals_cell_ops():
    layout = layout_of(n_users=3, n_items=3, embed_dim=2, hidden=())
    gm = build_group_map(layout)
    meta = init_meta(gm, d=3, k=1, seed=5)
    rng = np.random.default_rng(2)
    theta = rng.normal(size=gm.n_coords)
    outs, hiddens = generate(meta, gm, [theta], zero_hidden(gm.n_coords, 3))
    assert len(outs) == 1 and len(hiddens) == 1
    for c in range(gm.n_coords):
        g = meta.group(int(gm.coord_group[c]))
        h = gru_step(g, np.zeros(3), float(theta[c]))
        np.testing.assert_allclose(hiddens[0][c], h, atol=1e-14)
        assert outs[0][c] == pytest.approx(readout(g, h), abs=1e-14)


def test_generate_is_causal_in_the_window():
    layout = layout_of()
    gm = build_group_map(layout)
    meta = init_meta(gm, d=4, k=4, seed=7)
    rng = np.random.default_rng(4)
    window = [rng.normal(size=gm.n_coords) for _ in range(4)]
    outs, _ = generate(meta, gm, window, zero_hidden(gm.n_coords, 4))
    # zero out future entries: outputs at earlier steps must not move
    tampered = [w.copy() for w in window]
    tampered[3][:] = 0.0
    tampered[2][:] = 0.0
    outs2, _ = generate(meta, gm, tampered, zero_hidden(gm.n_coords, 4))
    np.testing.assert_array_equal(outs[0], outs2[0])
    np.testing.assert_array_equal(outs[1], outs2[1])
    assert not np.array_equal(outs[3], outs2[3])


def test_generate_group_locality():
    layout = layout_of(n_users=4, n_items=4, embed_dim=2, hidden=())
    gm = build_group_map(layout)
    meta = init_meta(gm, d=3, k=2, seed=9)
    rng = np.random.default_rng(6)
    window = [rng.normal(size=gm.n_coords) for _ in range(2)]
    base_outs, _ = generate(meta, gm, window, zero_hidden(gm.n_coords, 3))
    target = 1  # coordinate index to perturb
    tampered = [w.copy() for w in window]
    tampered[0][target] += 0.5
    tampered[1][target] -= 0.25
    outs, _ = generate(meta, gm, tampered, zero_hidden(gm.n_coords, 3))
    changed = np.nonzero(outs[1] != base_outs[1])[0]
    assert changed.tolist() == [target]


def test_generate_fixed_point_convergence_smoke():
    layout = layout_of(n_users=3, n_items=3, embed_dim=2, hidden=())
    gm = build_group_map(layout)
    meta = init_meta(gm, d=4, k=8, seed=1)
    theta = np.random.default_rng(11).normal(size=gm.n_coords)
    outs, _ = generate(meta, gm, [theta] * 8, zero_hidden(gm.n_coords, 4))
    diffs = [np.max(np.abs(outs[i + 1] - outs[i])) for i in range(7)]
    # repeated identical input drives the cell toward a fixed point
    assert diffs[-1] < diffs[0]
    assert all(b <= a * 1.01 + 1e-12 for a, b in zip(diffs, diffs[1:]))


def test_generate_validates_shapes():
    layout = layout_of()
    gm = build_group_map(layout)
    meta = init_meta(gm, d=4, k=2, seed=0)
    with pytest.raises(DataError):
        generate(meta, gm, [], zero_hidden(gm.n_coords, 4))
    with pytest.raises(DataError):
        generate(meta, gm, [np.zeros(3)], zero_hidden(gm.n_coords, 4))
    with pytest.raises(DataError):
        generate(meta, gm, [np.zeros(gm.n_coords)], zero_hidden(gm.n_coords + 1, 4))


def test_rollout_nodes_match_generate():
    layout = layout_of(n_users=4, n_items=5, embed_dim=2, hidden=(3,))
    gm = build_group_map(layout)
    meta = init_meta(gm, d=3, k=3, seed=13)
    rng = np.random.default_rng(8)
    window = [rng.normal(size=gm.n_coords) for _ in range(3)]
    h0 = zero_hidden(gm.n_coords, 3)
    plain_outs, _ = generate(meta, gm, window, h0)
    tape = Tape()
    leaves = meta_leaves(tape, meta)
    nodes = rollout_nodes(tape, meta, leaves, gm.coord_group, h0.h, window)
    for plain, node in zip(plain_outs, nodes):
        np.testing.assert_array_equal(plain, node.value)


def test_residual_readout_initial_identity_quality():
    layout = layout_of()
    gm = build_group_map(layout)
    meta = init_meta(gm, d=4, k=1, seed=2, residual_readout=True)
    theta = np.random.default_rng(3).normal(size=gm.n_coords)
    outs, _ = generate(meta, gm, [theta], zero_hidden(gm.n_coords, 4))
    # with the residual option the first generated model stays near its input
    assert np.max(np.abs(outs[0] - theta)) < 0.5


# ----------------------------------------------------------------------
# linear combiner


def test_linear_one_hot_returns_last():
    rng = np.random.default_rng(0)
    window = [rng.normal(size=20) for _ in range(3)]
    out = linear_combine(np.array([0.0, 0.0, 1.0]), window)
    np.testing.assert_array_equal(out, window[2])


def test_linear_mix_of_identical_models():
    theta = np.random.default_rng(1).normal(size=15)
    out = linear_combine(np.array([0.5, 0.5]), [theta, theta.copy()])
    np.testing.assert_allclose(out, theta, atol=1e-15)


def test_linear_matches_dot_oracle():
    rng = np.random.default_rng(2)
    window = [rng.normal(size=10) for _ in range(4)]
    alpha = rng.normal(size=4)
    out = linear_combine(alpha, window)
    for c in range(10):
        want = sum(alpha[i] * window[i][c] for i in range(4))
        assert out[c] == pytest.approx(want, abs=1e-12)


def test_linear_length_mismatch():
    with pytest.raises(DataError):
        linear_combine(np.ones(2), [np.zeros(4)])


def test_linear_nodes_match_plain():
    rng = np.random.default_rng(5)
    window = [rng.normal(size=12) for _ in range(3)]
    alpha = rng.normal(size=3)
    tape = Tape()
    leaf = tape.leaf(alpha)
    node = linear_combine_nodes(tape, leaf, window)
    np.testing.assert_allclose(node.value, linear_combine(alpha, window), atol=1e-15)


# ----------------------------------------------------------------------
# checkpoints


def test_meta_checkpoint_roundtrip(tmp_path):
    layout = layout_of()
    gm = build_group_map(layout)
    meta = init_meta(gm, d=4, k=3, seed=17)
    hidden = HiddenStore(h=np.random.default_rng(4).normal(size=(gm.n_coords, 4)), tag=5)
    path = tmp_path / "meta.ckpt"
    save_meta(path, meta, hidden, gm, period=9)
    loaded, h2, period = load_meta(path, gm)
    assert period == 9
    assert h2.tag == 5
    np.testing.assert_array_equal(h2.h, hidden.h)
    for name in meta.STACKS:
        np.testing.assert_array_equal(getattr(loaded, name), getattr(meta, name))


def test_meta_checkpoint_rejects_other_group_map(tmp_path):
    gm = build_group_map(layout_of())
    other = build_group_map(layout_of(embed_dim=2))
    meta = init_meta(gm, d=4, k=3, seed=17)
    path = tmp_path / "meta.ckpt"
    save_meta(path, meta, zero_hidden(gm.n_coords, 4), gm, period=1)
    with pytest.raises(DataError, match="group map"):
        load_meta(path, other)


def test_linear_checkpoint_roundtrip(tmp_path):
    params = init_linear(4)
    params.alpha[:] = [0.1, 0.2, 0.3, 0.4]
    path = tmp_path / "linear.ckpt"
    save_linear(path, params, period=3)
    loaded, period = load_linear(path)
    assert period == 3
    np.testing.assert_array_equal(loaded.alpha, params.alpha)
