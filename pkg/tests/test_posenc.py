import numpy as np
import pytest

from svlb.errors import CapacityError, ConfigurationError, DimensionError
from svlb.posenc import (
    PositionKind, PositionMode, apply_rope1d, apply_rope2d, grid_positions, learned_posemb, make_plan,
)
from svlb.tensor import Tensor
from svlb.verify import rope2d_relative_errors, rope_suite


def _rot1d(vec, pos, plan):
    return apply_rope1d(Tensor(vec.reshape(1, 1, 1, -1)), [pos], plan).data.reshape(-1)


def test_rope2d_relative_position_is_exhaustively_exact():
    rel, norm, pairs = rope2d_relative_errors(grid=(4, 4), head_dim=8)
    assert pairs == 256
    assert rel <= 1e-10
    assert norm <= 1e-10


def test_rope_suite_passes():
    assert all(r.ok for r in rope_suite())


def test_rope1d_dot_product_depends_only_on_offset():
    rng = np.random.default_rng(3)
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_1D), 8)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    for offset in (0, 1, 5):
        dots = [_rot1d(q, m, plan) @ _rot1d(k, m + offset, plan) for m in (0, 3, 11)]
        assert max(dots) - min(dots) <= 1e-10


def test_rope1d_position_zero_is_identity():
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_1D), 6)
    v = np.arange(6.0)
    np.testing.assert_array_equal(_rot1d(v, 0, plan), v)


def test_rope2d_rows_rotate_first_half_only():
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_2D), 8)
    x = Tensor(np.ones((1, 1, 2, 8)))
    out = apply_rope2d(x, (2, 1), plan).data[0, 0]
    # token 1 sits at (1, 0): column half untouched
    np.testing.assert_array_equal(out[1, 4:], np.ones(4))
    assert not np.allclose(out[1, :4], np.ones(4))


def test_rope2d_separate_column_base_keeps_relative_property():
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_2D, theta_base=100.0, theta_base_w=1000.0), 8)
    rng = np.random.default_rng(4)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    x = np.broadcast_to(q, (9, 8)).reshape(1, 1, 9, 8)
    y = np.broadcast_to(k, (9, 8)).reshape(1, 1, 9, 8)
    rq = apply_rope2d(Tensor(x), (3, 3), plan).data[0, 0]
    rk = apply_rope2d(Tensor(y), (3, 3), plan).data[0, 0]
    # (0,0)->(1,1) and (1,1)->(2,2) share the offset (1,1)
    assert rq[0] @ rk[4] == pytest.approx(rq[4] @ rk[8], abs=1e-10)


def test_grid_positions_with_head_token():
    h, w = grid_positions(2, 3, n_prefix=1)
    assert (h[0], w[0]) == (0, 0)
    assert (h[1], w[1]) == (1, 1)
    assert (h[-1], w[-1]) == (2, 3)
    h, w = grid_positions(2, 3)
    assert list(h) == [0, 0, 0, 1, 1, 1] and list(w) == [0, 1, 2, 0, 1, 2]


def test_plan_head_dim_constraints():
    with pytest.raises(ConfigurationError):
        make_plan(PositionMode(kind=PositionKind.ROPE_2D), 6)
    with pytest.raises(ConfigurationError):
        make_plan(PositionMode(kind=PositionKind.ROPE_1D), 5)
    with pytest.raises(ValueError):
        PositionMode(kind=PositionKind.ROPE_1D, theta_base=1.0)


def test_rope2d_length_must_match_grid():
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_2D), 4)
    with pytest.raises(DimensionError):
        apply_rope2d(Tensor(np.ones((1, 1, 5, 4))), (2, 2), plan)


def test_learned_table_capacity():
    table = Tensor(np.zeros((4, 3)))
    out = learned_posemb(Tensor(np.ones((1, 4, 3))), table)
    assert out.shape == (1, 4, 3)
    with pytest.raises(CapacityError):
        learned_posemb(Tensor(np.ones((1, 5, 3))), table)


def test_rope1d_relative_position_over_every_small_offset():
    rng = np.random.default_rng(5)
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_1D), 8)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    rq = {m: _rot1d(q, m, plan) for m in range(16)}
    rk = {n: _rot1d(k, n, plan) for n in range(16)}
    for m in range(8):
        for n in range(8):
            for s in range(8):
                assert rq[m + s] @ rk[n + s] == pytest.approx(rq[m] @ rk[n], abs=1e-10)


def test_rope1d_preserves_norm_and_is_linear():
    rng = np.random.default_rng(6)
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_1D), 6)
    for _ in range(50):
        x, y = rng.standard_normal(6), rng.standard_normal(6)
        a, b = rng.standard_normal(2)
        pos = int(rng.integers(0, 100))
        fx, fy = _rot1d(x, pos, plan), _rot1d(y, pos, plan)
        assert np.linalg.norm(fx) == pytest.approx(np.linalg.norm(x), abs=1e-12)
        np.testing.assert_allclose(_rot1d(a * x + b * y, pos, plan), a * fx + b * fy, atol=1e-12)


def test_rope1d_unit_pair_at_position_one():
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_1D), 2)
    np.testing.assert_allclose(_rot1d(np.array([1.0, 0.0]), 1, plan), [np.cos(1.0), np.sin(1.0)], atol=1e-15)


def test_rope2d_on_a_single_column_is_rope1d_on_the_row_half():
    rng = np.random.default_rng(7)
    hp, dh = 5, 8
    plan2d = make_plan(PositionMode(kind=PositionKind.ROPE_2D), dh)
    plan1d = make_plan(PositionMode(kind=PositionKind.ROPE_1D), dh // 2)
    x = rng.standard_normal((1, 1, hp, dh))
    out = apply_rope2d(Tensor(x), (hp, 1), plan2d).data
    rows = apply_rope1d(Tensor(x[..., : dh // 2].copy()), list(range(hp)), plan1d).data
    np.testing.assert_allclose(out[..., : dh // 2], rows, atol=1e-12)
    np.testing.assert_array_equal(out[..., dh // 2:], x[..., dh // 2:])


def test_rope2d_four_dim_example():
    plan = make_plan(PositionMode(kind=PositionKind.ROPE_2D), 4)
    x = Tensor(np.tile([1.0, 0.0, 1.0, 0.0], (1, 1, 2, 1)))
    # token 1 of a 2x1 grid sits at row 1, column 0
    out = apply_rope2d(x, (2, 1), plan).data[0, 0, 1]
    np.testing.assert_allclose(out, [np.cos(1.0), np.sin(1.0), 1.0, 0.0], atol=1e-15)
