import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from ugsplat.errors import InputError
from ugsplat.hashgrid import EncodingConfig, HashGridEncoder, InputEncoder, hash_index

P2, P3 = 2654435761, 805459861


def _grid(levels=1, res=4.0, table=2 ** 10, feats=4, seed=0, scale=1.0):
    g = HashGridEncoder(levels, feats, res, 2.0, table, np.zeros(3), np.ones(3), seed=seed)
    g.tables = np.random.default_rng(seed).normal(0, scale, g.tables.shape)
    return g


def test_hash_zero():
    assert hash_index(np.array([0, 0, 0]), 2 ** 14) == 0


def test_hash_unit_x():
    assert hash_index(np.array([1, 0, 0]), 2 ** 14) == 1


@given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6), st.integers(0, 10 ** 6),
       st.integers(1, 20))
def test_hash_matches_python_bigint(x, y, z, log_t):
    t = 2 ** log_t
    expect = ((x * 1) ^ (y * P2) ^ (z * P3)) % t
    assert hash_index(np.array([x, y, z]), t) == expect
    assert hash_index(np.array([x, y, z]), t) == hash_index(np.array([x, y, z]), t)


def test_hash_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        hash_index(np.array([1, 2, 3]), 1000)


def test_output_dimension_default():
    enc = HashGridEncoder.spanning(np.zeros(3), np.ones(3))
    assert enc.encode(np.array([0.3, 0.4, 0.5])).shape == (24,)
    np.testing.assert_allclose(enc.resolutions[[0, -1]], [16, 512])
    assert np.all(np.diff(enc.resolutions) > 0)


def test_vertex_returns_table_row():
    g = _grid(levels=2, res=4.0)
    x = np.array([1 / 4, 2 / 4, 3 / 4])          # a vertex at both levels (res 4 and 8)
    out = g.encode(x).reshape(2, 4)
    for lvl, r in enumerate(g.resolutions):
        row = hash_index(np.rint(x * r).astype(np.int64), g.table_size)
        np.testing.assert_array_equal(out[lvl], g.tables[lvl, row])


def test_cell_centre_is_mean_of_corners():
    g = _grid(res=4.0, table=2 ** 12)
    base = np.array([1, 2, 1])
    corners = [base + np.array(o) for o in itertools.product((0, 1), repeat=3)]
    rows = [int(hash_index(c, g.table_size)) for c in corners]
    assert len(set(rows)) == 8
    x = (base + 0.5) / 4.0
    np.testing.assert_allclose(g.encode(x), np.mean(g.tables[0, rows], axis=0), atol=1e-14)


def test_explicit_trilinear_oracle(rng):
    g = _grid(levels=3, res=3.0, table=2 ** 8)
    for _ in range(20):
        x = rng.uniform(0, 1, 3)
        out = g.encode(x).reshape(3, 4)
        for lvl, r in enumerate(g.resolutions):
            s = x * r
            b = np.floor(s).astype(int)
            f = s - b
            acc = np.zeros(4)
            for o in itertools.product((0, 1), repeat=3):
                w = np.prod([f[k] if o[k] else 1 - f[k] for k in range(3)])
                acc += w * g.tables[lvl, hash_index(b + np.array(o), g.table_size)]
            np.testing.assert_allclose(out[lvl], acc, atol=1e-13)


def test_linear_along_axes_inside_cell():
    g = _grid(res=4.0)
    a = np.array([0.26, 0.51, 0.76])
    b = np.array([0.49, 0.74, 0.99])             # same cell [1,2]x[2,3]x[3,4] / 4
    # varying one coordinate at a time inside a cell is exactly linear
    for k in range(3):
        c = a.copy()
        c2 = a.copy()
        c2[k] = b[k]
        mid = a.copy()
        mid[k] = 0.5 * (a[k] + b[k])
        np.testing.assert_allclose(g.encode(mid), 0.5 * (g.encode(c) + g.encode(c2)), atol=1e-14)


def test_non_finite_input_rejected():
    with pytest.raises(InputError):
        _grid().encode(np.array([np.nan, 0, 0]))


def test_out_of_box_is_clamped():
    g = _grid()
    np.testing.assert_array_equal(g.encode(np.array([1.7, 0.5, -2.0])),
                                  g.encode(np.array([1.0, 0.5, 0.0])))
    assert g.clamp_count == 1


def test_backward_zero_upstream():
    g = _grid(levels=2)
    _, cache = g.forward(np.array([[0.3, 0.2, 0.9]]))
    dt, dx = g.backward(cache, np.zeros((1, 8)))
    assert not dt.any() and not dx.any()


def test_backward_vertex_assigns_full_row():
    g = _grid(res=4.0)
    x = np.array([[0.25, 0.5, 0.75]])
    _, cache = g.forward(x)
    up = np.array([[1.0, -2.0, 3.0, 0.5]])
    dt, _ = g.backward(cache, up)
    row = hash_index(np.array([1, 2, 3]), g.table_size)
    np.testing.assert_allclose(dt[0, row], up[0])
    dt[0, row] = 0
    assert not dt.any()


def _safe_point(g, rng, margin=1e-3):
    while True:
        x = rng.uniform(0.02, 0.98, 3)
        f = (x[None] * g.resolutions[:, None]) % 1.0
        if np.all((f > margin) & (f < 1 - margin)):
            return x


def test_gradients_match_finite_differences(rng):
    worst = 0.0
    for trial in range(100):
        g = _grid(levels=3, res=2.0 + trial % 3, table=2 ** 6, seed=trial)
        x = _safe_point(g, rng)[None].copy()
        up = rng.normal(size=(1, g.output_dim))
        _, cache = g.forward(x)
        dt, dx = g.backward(cache, up)
        f = lambda: float(np.sum(g.encode(x) * up))
        worst = max(worst, rel_err(dx, numeric_grad(f, x)))
        worst = max(worst, rel_err(dt, numeric_grad(f, g.tables)))
    assert worst < 1e-4


def test_backward_accumulates_collisions():
    # table of 1 row: every corner collides, so the row gradient is the upstream sum
    g = _grid(levels=1, table=1, feats=2)
    x = np.array([[0.3, 0.6, 0.1], [0.9, 0.2, 0.4]])
    _, cache = g.forward(x)
    up = np.array([[1.0, 2.0], [3.0, -1.0]])
    dt, _ = g.backward(cache, up)
    np.testing.assert_allclose(dt[0, 0], up.sum(0))


# -------------------------------------------------------------- input layout
def test_default_layout_passes_raw_inputs(rng):
    enc = InputEncoder(EncodingConfig(), [[-1, -1, -1], [1, 1, 1]], table_size=2 ** 8)
    assert enc.output_dim == 34
    n = 4
    p, v = rng.uniform(-1, 1, (n, 3)), rng.normal(size=(n, 3))
    q, s = rng.normal(size=(n, 4)), rng.uniform(0.1, 1, (n, 3))
    out, _ = enc.forward(p, v, q, s)
    np.testing.assert_array_equal(out[:, 24:27], v)
    np.testing.assert_array_equal(out[:, 27:31], q)
    np.testing.assert_array_equal(out[:, 31:34], s)


@pytest.mark.parametrize("dims", [(5, 0, 0, 1), (6, 1, 1, 0), (4, 1, 1, 1)])
def test_alternative_allocations_gradients(rng, dims):
    enc = InputEncoder(EncodingConfig.from_tuple(dims), [[-1, -1, -1], [1, 1, 1]],
                       table_size=2 ** 6, base_resolution=2, finest_resolution=8, seed=3)
    for g in enc.grids.values():
        g.tables = rng.normal(size=g.tables.shape)
    n = 3
    p = rng.uniform(-0.9, 0.9, (n, 3))
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(0.1, 1, (n, 3))
    out, cache = enc.forward(p, v, q, s)
    up = rng.normal(size=out.shape)
    raw, tables = enc.backward(cache, up, scales=s)
    f = lambda: float(np.sum(enc.forward(p, v, q, s)[0] * up))
    for name, arr in (("position", p), ("view", v), ("rotation", q), ("scale", s)):
        assert rel_err(raw[name], numeric_grad(f, arr, h=1e-6)) < 1e-4, name
    for name, g in enc.grids.items():
        assert rel_err(tables[name], numeric_grad(f, g.tables)) < 1e-4, name
