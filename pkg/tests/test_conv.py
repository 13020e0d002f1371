import itertools
import logging
import math

import numpy as np
import pytest

from tchain.conv import (
    ConvKernel,
    TcBlockFactors,
    block_kernel,
    build_tc_block,
    conv2d_reference,
    conv_flops,
    default_grid,
    fit_kernel,
    flops,
    kernel_to_order3,
    order3_to_kernel,
    params,
    rank_grid_search,
    tc_block_forward,
    write_grid_csv,
)
from tchain.decompose import FitConfig
from tchain.model import TCModel, reconstruct


def rand_block_model(rng, c_out, c_in, d, r1, r2, r3):
    return TCModel([rng.standard_normal((r3, c_out, r1)), rng.standard_normal((r1, c_in, r2)),
                    rng.standard_normal((r2, d * d, r3))])


def loop_conv(x, w, stride, padding):
    """Quadruple-loop cross-correlation, written independently of the library."""
    c_out, c_in, d, _ = w.shape
    h, wd = x.shape[1:]
    xp = np.zeros((c_in, h + 2 * padding, wd + 2 * padding))
    xp[:, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - d) // stride + 1
    wo = (wd + 2 * padding - d) // stride + 1
    out = np.zeros((c_out, ho, wo))
    for o, i, j in itertools.product(range(c_out), range(ho), range(wo)):
        acc = 0.0
        for c, a, b in itertools.product(range(c_in), range(d), range(d)):
            acc += w[o, c, a, b] * xp[c, i * stride + a, j * stride + b]
        out[o, i, j] = acc
    return out


def rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def test_kernel_reshape():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((4, 3, 3, 3))
    t = kernel_to_order3(ConvKernel(w))
    assert t.shape == (4, 3, 9)
    for o, c, a, b in itertools.product(range(4), range(3), range(3), range(3)):
        assert t[o, c, a * 3 + b] == w[o, c, a, b]
    np.testing.assert_array_equal(order3_to_kernel(t).weights, w)
    assert kernel_to_order3(rng.standard_normal((5, 2, 1, 1))).shape == (5, 2, 1)
    with pytest.raises(ValueError):
        order3_to_kernel(np.ones((2, 2, 5)))
    with pytest.raises(ValueError):
        ConvKernel(np.ones((2, 2, 3, 2)))
    with pytest.raises(ValueError):
        ConvKernel(np.ones((2, 2, 3, 3)), stride=0)


def test_factor_shapes_and_params():
    rng = np.random.default_rng(1)
    m = rand_block_model(rng, 64, 64, 3, 10, 10, 10)
    f = build_tc_block(m, (64, 64, 3, 3))
    assert f.W1.shape == (64, 100)
    assert f.W2.shape == (10, 10, 3, 3)
    assert f.W3.shape == (100, 64)
    assert f.ranks == (10, 10, 10)
    assert f.n_params == m.n_params == params((10, 10, 10), 64, 64, 3)
    with pytest.raises(ValueError):
        build_tc_block(m, (64, 32, 3, 3))
    with pytest.raises(ValueError):
        build_tc_block(TCModel([np.ones((1, 2, 1))] * 4))
    with pytest.raises(ValueError):
        TcBlockFactors(f.W1, f.W2, f.W3, (10, 10, 9))


def test_block_composes_to_kernel():
    rng = np.random.default_rng(2)
    for _ in range(10):
        c_out, c_in, d, r1, r2, r3 = (int(v) for v in rng.integers(1, 6, size=6))
        m = rand_block_model(rng, c_out, c_in, d, r1, r2, r3)
        w = reconstruct(m).reshape(c_out, c_in, d, d)
        assert rel(block_kernel(build_tc_block(m)), w) <= 1e-12


def test_reference_conv_examples():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((3, 5, 6))
    ident = ConvKernel(np.eye(3).reshape(3, 3, 1, 1))
    np.testing.assert_array_equal(conv2d_reference(x, ident), x)
    avg = ConvKernel(np.full((1, 1, 3, 3), 1 / 9))
    out = conv2d_reference(np.full((1, 6, 7), 2.5), avg)
    np.testing.assert_allclose(out, 2.5, rtol=1e-14)
    assert out.shape == (1, 4, 5)
    with pytest.raises(ValueError):
        conv2d_reference(rng.standard_normal((1, 6, 6)), ConvKernel(np.ones((1, 1, 3, 3)), stride=2))
    with pytest.raises(ValueError):
        conv2d_reference(rng.standard_normal((2, 6, 6)), avg)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 2)])
def test_reference_matches_loops(stride, padding):
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((2, 7, 9))
    ref = loop_conv(x, w, stride, padding)
    assert rel(conv2d_reference(x, ConvKernel(w, stride, padding)), ref) <= 1e-12


def test_separable_case():
    rng = np.random.default_rng(5)
    m = rand_block_model(rng, 3, 4, 3, 1, 1, 1)
    f = build_tc_block(m)
    assert np.linalg.matrix_rank(f.W1) == 1 and np.linalg.matrix_rank(f.W3) == 1
    assert f.W2.shape == (1, 1, 3, 3)
    x = rng.standard_normal((4, 8, 8))
    # pointwise mix to one channel, one spatial filter, then a pointwise expansion
    mixed = np.tensordot(f.W1[:, 0], x, axes=(0, 0))[None]
    spatial = conv2d_reference(mixed, ConvKernel(f.W2[0, 0][None, None], 1, 1))
    expected = f.W3[0][:, None, None] * spatial[0]
    np.testing.assert_allclose(tc_block_forward(x, f, 1, 1), expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", list(itertools.product([1, 2], [0, 1, 2])))
def test_forward_equivalence(stride, padding):
    rng = np.random.default_rng(10 * stride + padding)
    m = rand_block_model(rng, 5, 4, 3, 2, 3, 2)
    k = order3_to_kernel(reconstruct(m), stride, padding)
    h = 3 + 4 * stride - 2 * padding
    h = h + (h + 2 * padding - 3) % stride
    x = rng.standard_normal((4, max(h, 3), max(h, 3) + stride))
    ref = conv2d_reference(x, k)
    out = tc_block_forward(x, build_tc_block(m), stride, padding)
    assert rel(out, ref) <= 1e-10
    with pytest.raises(ValueError):
        tc_block_forward(rng.standard_normal((3, 8, 8)), build_tc_block(m), stride, padding)


def test_flops_counts():
    assert flops((2, 3, 4), 5, 6, 3) == 5 * 6 + 24 * 9 + 8 * 6
    assert conv_flops(5, 6, 3) == 270
    base = flops((2, 2, 2), 8, 8, 3)
    for i in range(3):
        r = [2, 2, 2]
        r[i] = 3
        assert flops(r, 8, 8, 3) > base


def test_default_grid_respects_size():
    k = ConvKernel(np.zeros((8, 8, 3, 3)))
    grid = default_grid(k)
    assert grid and all(params(r, 8, 8, 3) <= k.weights.size for r in grid)
    assert (1, 1, 1) in grid and (16, 16, 16) not in grid


def test_grid_search_planted(tmp_path):
    rng = np.random.default_rng(6)
    m = rand_block_model(rng, 8, 8, 3, 2, 2, 2)
    k = order3_to_kernel(reconstruct(m))
    grid = [(2, 2, 2), (1, 1, 1), (1, 2, 1)]
    entries = rank_grid_search(k, grid=grid, n_starts=5)
    assert len(entries) == 3
    assert entries[0].ranks == (2, 2, 2) and entries[0].rel_err <= 1e-6
    assert all(e.rel_err > 1e-3 for e in entries[1:])
    assert [e.rel_err for e in entries] == sorted(e.rel_err for e in entries)
    assert all(e.flops == flops(e.ranks, 8, 8, 3) for e in entries)
    budget = rank_grid_search(k, flops_budget=flops((1, 2, 1), 8, 8, 3), grid=grid)
    assert {e.ranks for e in budget} == {(1, 1, 1), (1, 2, 1)}
    p = tmp_path / "grid.csv"
    write_grid_csv(entries, p)
    assert p.read_text().splitlines()[0] == "R1,R2,R3,rel_err,flops,params"


def test_multistart_keeps_best():
    rng = np.random.default_rng(8)
    k = ConvKernel(rng.standard_normal((4, 4, 3, 3)))
    cfg = FitConfig(max_iters=30)
    singles = [fit_kernel(k, (2, 2, 2), cfg, seed=s)[1] for s in range(3)]
    assert fit_kernel(k, (2, 2, 2), cfg, seed=0, n_starts=3)[1] == min(singles)
    with pytest.raises(ValueError):
        fit_kernel(k, (2, 2, 2), cfg, n_starts=0)


def test_grid_search_edge_cases(caplog):
    k = ConvKernel(np.random.default_rng(7).standard_normal((2, 2, 1, 1)))
    with pytest.raises(ValueError):
        rank_grid_search(k, flops_budget=0)
    with caplog.at_level(logging.WARNING, logger="tchain"):
        assert rank_grid_search(k, flops_budget=1, grid=[(2, 2, 2)]) == []
    assert any("no grid point" in r.message for r in caplog.records)
    full = rank_grid_search(k, math.inf, math.inf)
    assert len(full) == len(default_grid(k))
