import numpy as np
import pytest

from dualview import reference as ref
from dualview.dem import (
    FUSION_VARIANTS,
    BranchParams,
    DemParams,
    dem_grad_check,
    dual_pool,
    enhance,
    fuse,
    global_enhance,
    local_enhance,
    multires_combine,
)
from dualview.exceptions import NotDivisible, ShapeMismatch, UnknownVariant
from dualview.geometry import compute_grid, global_crop, global_recombine, local_recombine
from dualview.tensor import LinearParams, Rng


def feature_case(rng, n_w, n_h, tw, th, d):
    grid = compute_grid(n_w * tw, n_h * th, tw, th)
    return rng.normal((n_h * th, n_w * tw, d)), rng.normal((n_h * th, n_w * tw, d)), grid


def test_uniform_attention_when_query_weights_vanish(rng):
    f_glo, f_loc, grid = feature_case(rng, 1, 1, 3, 2, 4)
    params = DemParams.init(4, rng)
    params.glo_branch.q = np.zeros((4, 4))
    out, attn = global_enhance(f_glo, f_loc, grid, params, return_attention=True)
    np.testing.assert_allclose(attn, 1.0 / 6.0, rtol=1e-15)
    mean_l = f_loc.reshape(-1, 4).mean(axis=0)
    want = mean_l @ params.glo_branch.v
    np.testing.assert_allclose(out.reshape(-1, 4), np.tile(want, (6, 1)), atol=1e-14)


def test_single_token_subgrids(rng):
    f_glo, f_loc, grid = feature_case(rng, 3, 2, 1, 1, 4)
    params = DemParams.init(4, rng)
    out, attn = global_enhance(f_glo, f_loc, grid, params, return_attention=True)
    np.testing.assert_array_equal(attn, np.ones((6, 1, 1)))
    np.testing.assert_allclose(out, f_loc @ params.glo_branch.v, atol=1e-14)
    out_l = local_enhance(f_glo, f_loc, grid, params)
    np.testing.assert_allclose(out_l, f_glo @ params.loc_branch.v, atol=1e-14)


@pytest.mark.parametrize("n_w, n_h, tw, th", [(2, 2, 2, 2), (1, 1, 2, 2), (2, 1, 1, 2), (1, 2, 2, 1)])
def test_enhancements_match_naive_oracle(rng, n_w, n_h, tw, th):
    f_glo, f_loc, grid = feature_case(rng, n_w, n_h, tw, th, 4)
    params = DemParams.init(4, rng)
    g, l = params.glo_branch, params.loc_branch
    want_g, maps_g = ref.naive_global_enhance(f_glo, f_loc, n_w, n_h, g.q, g.k, g.v)
    want_l, maps_l = ref.naive_local_enhance(f_glo, f_loc, n_w, n_h, l.q, l.k, l.v)
    got_g, attn_g = global_enhance(f_glo, f_loc, grid, params, return_attention=True)
    got_l, attn_l = local_enhance(f_glo, f_loc, grid, params, return_attention=True)
    np.testing.assert_allclose(got_g, want_g, rtol=0, atol=1e-10)
    np.testing.assert_allclose(got_l, want_l, rtol=0, atol=1e-10)
    np.testing.assert_allclose(attn_g, np.stack(maps_g), rtol=0, atol=1e-12)
    np.testing.assert_allclose(attn_l, np.stack(maps_l), rtol=0, atol=1e-12)


def test_local_enhance_degenerate_grid_is_plain_cross_attention(rng):
    f_glo, f_loc, grid = feature_case(rng, 1, 1, 2, 2, 4)
    params = DemParams.init(4, rng)
    l = params.loc_branch
    want, _ = ref.naive_cross_attention(f_loc.reshape(4, 4), f_glo.reshape(4, 4), l.q, l.k, l.v)
    np.testing.assert_allclose(local_enhance(f_glo, f_loc, grid, params).reshape(4, 4), want,
                               atol=1e-12)


def test_shared_branches_symmetry(rng):
    f, _, grid = feature_case(rng, 1, 1, 2, 3, 4)
    params = DemParams.init(4, rng, share_branches=True)
    assert params.shared
    np.testing.assert_array_equal(global_enhance(f, f, grid, params),
                                  local_enhance(f, f, grid, params))


def test_attention_rows_sum_to_one(rng):
    for _ in range(5):
        f_glo, f_loc, grid = feature_case(rng, 3, 2, 2, 2, 8)
        params = DemParams.init(8, rng)
        params.glo_branch.q *= 10.0
        for fn in (global_enhance, local_enhance):
            _, attn = fn(f_glo, f_loc, grid, params, return_attention=True)
            np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_shape_contract(rng):
    f_glo, f_loc, grid = feature_case(rng, 3, 2, 2, 3, 8)
    for variant in FUSION_VARIANTS:
        params = DemParams.init(8, rng, variant)
        e = enhance(f_glo, f_loc, grid, params)
        assert e.v_glo.shape == e.v_loc.shape == e.v_dual.shape == f_glo.shape
        assert e.f_dual.shape == (3, 2, 8)


def test_crop_of_recombined_features_returns_sub_features(rng):
    subs = [rng.normal((2, 3, 4)) for _ in range(6)]
    grid = compute_grid(9, 4, 3, 2)
    f_glo = global_recombine(subs, grid)
    for got, want in zip(global_crop(f_glo, grid).items, subs):
        np.testing.assert_array_equal(got, want)


def test_global_enhance_locality(rng):
    f_glo, f_loc, grid = feature_case(rng, 2, 2, 2, 2, 4)
    params = DemParams.init(4, rng)
    base = global_enhance(f_glo, f_loc, grid, params)
    # token (v=1, u=0) of global sub-grid i=(0, 1) sits at y=0+1*2, x=1+0*2
    bumped = f_loc.copy()
    bumped[2, 1] += 1.0
    diff = np.abs(global_enhance(f_glo, bumped, grid, params) - base).max(axis=-1)
    owner = np.zeros((4, 4), dtype=int)
    for idx, sub in enumerate(global_crop(np.arange(16.0).reshape(4, 4, 1), grid).items):
        for val in sub.ravel():
            owner.flat[int(val)] = idx
    assert np.all(diff[owner != 1] == 0.0)
    assert np.all(diff[owner == 1] > 0.0)


def test_fuse_linear_concat_selector(rng):
    v_glo, v_loc = rng.normal((3, 3, 2)), rng.normal((3, 3, 2))
    sel = LinearParams(np.array([[1.0], [0.0]]), np.zeros(1))
    z = np.zeros((2, 2))
    params = DemParams(BranchParams(z, z, z), BranchParams(z, z, z), sel, sel)
    out = fuse(v_glo, v_loc, params)
    np.testing.assert_array_equal(out[..., 0], v_glo[..., 0])
    np.testing.assert_array_equal(out[..., 1], v_loc[..., 0])


def test_fuse_closed_forms(rng):
    params = DemParams.init(4, rng)
    x, y = rng.normal((2, 3, 4)), rng.normal((2, 3, 4))
    np.testing.assert_array_equal(fuse(x, -x, params, "addition"), np.zeros_like(x))
    params.mix_logits = np.array([0.7, 0.7])
    np.testing.assert_array_equal(fuse(x, y, params, "weighted_addition"), 0.5 * x + 0.5 * y)
    params.mix_logits = np.array([0.0, np.log(3.0)])
    np.testing.assert_allclose(fuse(x, y, params, "weighted_addition"), 0.25 * x + 0.75 * y,
                               rtol=1e-14)
    np.testing.assert_array_equal(fuse(x, y, params, "multiplication"), x * y)
    np.testing.assert_array_equal(fuse(x, y, params, "maxpool"), np.maximum(x, y))
    assert fuse(x, y, params, "conv3x3").shape == x.shape
    with pytest.raises(UnknownVariant):
        fuse(x, y, params, "attention")
    with pytest.raises(ShapeMismatch):
        fuse(x, y[:1], params, "addition")


def test_conv3x3_fusion_center_tap(rng):
    params = DemParams.init(2, rng, "conv3x3")
    k = np.zeros((3, 3, 4, 2))
    k[1, 1, 0, 0] = 1.0  # glo channel 0 -> out 0
    k[1, 1, 3, 1] = 1.0  # loc channel 1 -> out 1
    params.conv_weight, params.conv_bias = k, np.zeros(2)
    x, y = rng.normal((3, 4, 2)), rng.normal((3, 4, 2))
    out = fuse(x, y, params)
    np.testing.assert_array_equal(out[..., 0], x[..., 0])
    np.testing.assert_array_equal(out[..., 1], y[..., 1])


def test_dual_pool(rng):
    grid = compute_grid(3, 3, 1, 1)
    x = rng.normal((72, 72, 2))
    out = dual_pool(x, compute_grid(72, 72, 24, 24))
    assert out.shape == (24, 24, 2)
    np.testing.assert_allclose(out, ref.naive_avg_pool(x, 3, 3), atol=1e-14)
    y = rng.normal((4, 4, 2))
    np.testing.assert_array_equal(dual_pool(y, compute_grid(4, 4, 4, 4)), y)
    np.testing.assert_allclose(dual_pool(np.full((6, 6, 2), -0.3), compute_grid(6, 6, 2, 2)), -0.3,
                               rtol=1e-15)
    with pytest.raises(NotDivisible):
        dual_pool(rng.normal((4, 4, 2)), grid)


def test_multires_combine(rng):
    a, b = rng.normal((2, 2, 4)), rng.normal((2, 2, 4))
    np.testing.assert_array_equal(multires_combine(np.zeros_like(b), b), b)
    np.testing.assert_array_equal(multires_combine(a, b), multires_combine(b, a))
    want = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        want[idx] = a[idx] + b[idx]
    np.testing.assert_array_equal(multires_combine(a, b), want)
    with pytest.raises(ShapeMismatch):
        multires_combine(a, b[:1])


@pytest.mark.parametrize("variant", FUSION_VARIANTS)
def test_gradients_d4(variant):
    rng = Rng(21)
    f_glo, f_loc, grid = feature_case(rng, 2, 2, 2, 2, 4)
    params = DemParams.init(4, rng, variant)
    params.mix_logits = rng.normal(2)
    res = dem_grad_check(f_glo, f_loc, grid, params, h=1e-4)
    assert res.max_rel_error < 1e-3, res


def test_gradients_shared_branches():
    rng = Rng(22)
    f_glo, f_loc, grid = feature_case(rng, 2, 1, 2, 2, 4)
    params = DemParams.init(4, rng, share_branches=True)
    res = dem_grad_check(f_glo, f_loc, grid, params)
    assert "loc.q" not in res.per_param
    assert res.max_rel_error < 1e-3


def test_param_validation(rng):
    with pytest.raises(UnknownVariant):
        DemParams.init(4, rng, "sum")
    p = DemParams.init(4, rng)
    with pytest.raises(ShapeMismatch):
        DemParams(p.glo_branch, p.loc_branch, LinearParams(np.zeros((4, 4))), p.fuse_loc)
    f_glo, f_loc, grid = feature_case(rng, 2, 2, 2, 2, 6)
    with pytest.raises(ShapeMismatch):
        global_enhance(f_glo, f_loc, grid, p)


def test_arrays_round_trip(rng):
    p = DemParams.init(4, rng, "conv3x3")
    q = DemParams.from_arrays(p.arrays(), "conv3x3")
    for k, v in p.arrays().items():
        np.testing.assert_array_equal(q.arrays()[k], v)
