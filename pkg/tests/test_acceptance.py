"""End-to-end acceptance criteria on the toy configuration (encoder 8x8, patch 4, d=8).

Each test carries an ``acceptance`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""
import numpy as np
import pytest

from dualview import io as dio
from dualview import reference as ref
from dualview.checks import GRIDS, check_bijection, gradcheck_suite
from dualview.cli import main
from dualview.dem import (
    FUSION_VARIANTS,
    BranchParams,
    DemParams,
    dual_pool,
    enhance,
    fuse,
    global_enhance,
    local_enhance,
)
from dualview.encoder import VisionEncoderSpec
from dualview.geometry import (
    GLOBAL,
    compute_grid,
    global_crop,
    global_recombine,
    local_crop,
    local_recombine,
    map_pixel,
)
from dualview.pipeline import ABLATIONS, TOY_ENCODER, PipelineConfig, PipelineParams, budget, encode_views, run
from dualview.tensor import LinearParams, Rng, linear

SEED = 2024


@pytest.mark.acceptance("AC1 crop bijectivity")
def test_crop_bijectivity():
    rng = Rng(SEED)
    ew, eh = TOY_ENCODER.input_w, TOY_ENCODER.input_h
    for k in range(200):
        n_w, n_h = GRIDS[k % len(GRIDS)]
        grid = compute_grid(n_w * ew, n_h * eh, ew, eh)
        img = rng.normal((grid.img_h, grid.img_w, 3))
        loc, glo = local_crop(img, grid), global_crop(img, grid)
        assert local_recombine(loc, grid).tobytes() == img.tobytes()
        assert global_recombine(glo, grid).tobytes() == img.tobytes()
        if k < 8:
            for got, want in zip(loc.items, ref.naive_local_crop(img, n_w, n_h)):
                assert np.array_equal(got, want)
            for got, want in zip(glo.items, ref.naive_global_crop(img, n_w, n_h)):
                assert np.array_equal(got, want)
    result = check_bijection(12)
    assert result.passed, result.detail


@pytest.mark.acceptance("AC2 global-crop formula fidelity")
def test_global_crop_formula():
    checked = 0
    for enc_w, enc_h in ((1, 1), (2, 3), (4, 4)):
        grid = compute_grid(3 * enc_w, 3 * enc_h, enc_w, enc_h)
        assert (grid.n_w, grid.n_h) == (3, 3)
        img = np.arange(grid.img_w * grid.img_h, dtype=float).reshape(grid.img_h, grid.img_w, 1)
        subs = global_crop(img, grid).items
        for i in range(3):
            for j in range(3):
                expect = ref.global_index_set(grid.img_w, grid.img_h, 3, 3, i, j)
                assert len(expect) == enc_w * enc_h
                for (u, v), (x, y) in expect.items():
                    assert map_pixel(grid, GLOBAL, (i, j), u, v) == (x, y)
                    assert (x, y) == (j + u * 3, i + v * 3)
                    assert subs[i * 3 + j][v, u, 0] == img[y, x, 0]
                    checked += 1
    assert checked == 9 * (1 + 6 + 16)


@pytest.mark.acceptance("AC3 attention normalization")
def test_attention_normalization():
    rng = Rng(SEED)
    worst = 0.0
    for draw in range(50):
        d = 8
        params = DemParams.init(d, rng)
        scale = 1.0 + draw / 5.0  # widen the logits as draws progress
        for br in (params.glo_branch, params.loc_branch):
            br.q = br.q * scale
        n_w, n_h = GRIDS[draw % len(GRIDS)]
        grid = compute_grid(n_w * 2, n_h * 2, 2, 2)
        f_glo = rng.normal((grid.img_h, grid.img_w, d))
        f_loc = rng.normal((grid.img_h, grid.img_w, d))
        for fn in (global_enhance, local_enhance):
            _, attn = fn(f_glo, f_loc, grid, params, return_attention=True)
            assert attn.shape == (grid.n_sub, 4, 4)
            assert np.all(attn >= 0)
            worst = max(worst, float(np.abs(attn.sum(axis=-1) - 1.0).max()))
    assert worst <= 1e-6, worst


@pytest.mark.acceptance("AC4 oracle equivalence")
def test_oracle_equivalence():
    rng = Rng(SEED)
    worst = 0.0
    for n_w, n_h in ((1, 1), (1, 2), (2, 1), (2, 2)):
        for tw, th in ((1, 1), (2, 1), (1, 2), (2, 2)):
            for d in (2, 4):
                grid = compute_grid(n_w * tw, n_h * th, tw, th)
                f_glo = rng.normal((grid.img_h, grid.img_w, d))
                f_loc = rng.normal((grid.img_h, grid.img_w, d))
                params = DemParams.init(d, rng)
                g, l = params.glo_branch, params.loc_branch
                want_g, _ = ref.naive_global_enhance(f_glo, f_loc, n_w, n_h, g.q, g.k, g.v)
                want_l, _ = ref.naive_local_enhance(f_glo, f_loc, n_w, n_h, l.q, l.k, l.v)
                worst = max(worst,
                            float(np.abs(global_enhance(f_glo, f_loc, grid, params) - want_g).max()),
                            float(np.abs(local_enhance(f_glo, f_loc, grid, params) - want_l).max()))
    assert worst <= 1e-10, worst


@pytest.mark.acceptance("AC5 gradient correctness")
def test_gradient_correctness():
    results = gradcheck_suite(SEED, dim=TOY_ENCODER.dim, grid=(2, 2), tokens=(2, 2), h=1e-4)
    assert set(results) == set(FUSION_VARIANTS)
    for variant, res in results.items():
        assert res.n_coords > 0
        assert res.max_rel_error < 1e-3, (variant, res)


@pytest.mark.acceptance("AC6 constant token budget")
def test_constant_token_budget():
    cfg = PipelineConfig(seed=SEED)
    params = PipelineParams.init(cfg)
    rng = Rng(SEED)
    want = TOY_ENCODER.w_l * TOY_ENCODER.h_l
    for scale in (1, 2, 3):
        img = rng.normal((8 * scale, 8 * scale, 3))
        assert len(run(img, cfg, params)) == want
    real = PipelineConfig(encoder=VisionEncoderSpec(336, 336, 14, 1024))
    assert budget(336, 336, real).tokens_final == 576
    assert budget(1008, 1008, real).encoder_calls == 18
    assert budget(1008, 1008, real).tokens_final == 576


@pytest.mark.acceptance("AC7 fusion variants")
def test_fusion_variants():
    rng = Rng(SEED)
    grid = compute_grid(4, 4, 2, 2)
    f_glo, f_loc = rng.normal((4, 4, 8)), rng.normal((4, 4, 8))

    for variant in FUSION_VARIANTS:
        e = enhance(f_glo, f_loc, grid, DemParams.init(8, rng, variant))
        assert e.v_dual.shape == (4, 4, 8)
        assert e.f_dual.shape == (2, 2, 8)

    v_glo, v_loc = rng.normal((3, 3, 2)), rng.normal((3, 3, 2))
    sel = LinearParams(np.array([[1.0], [0.0]]), np.zeros(1))
    z = np.zeros((2, 2))
    p = DemParams(BranchParams(z, z, z), BranchParams(z, z, z), sel, sel)
    out = fuse(v_glo, v_loc, p, "linear_concat")
    assert np.array_equal(out, np.stack([v_glo[..., 0], v_loc[..., 0]], axis=-1))

    x, y = rng.normal((2, 2, 4)), rng.normal((2, 2, 4))
    p = DemParams.init(4, rng, "weighted_addition")
    assert np.array_equal(fuse(x, -x, p, "addition"), np.zeros_like(x))
    assert np.array_equal(fuse(x, y, p, "addition"), x + y)
    p.mix_logits = np.array([0.3, 0.3])
    assert np.array_equal(fuse(x, y, p, "weighted_addition"), (x + y) / 2)
    p.mix_logits = np.array([0.0, np.log(3.0)])
    weights = np.exp(p.mix_logits) / np.exp(p.mix_logits).sum()
    assert np.allclose(weights, [0.25, 0.75], rtol=0, atol=1e-15)
    assert np.allclose(fuse(x, y, p, "weighted_addition"), 0.25 * x + 0.75 * y, rtol=1e-14, atol=0)


@pytest.mark.acceptance("AC8 ablation structure")
def test_ablation_structure():
    cfg = PipelineConfig(seed=SEED)
    params = PipelineParams.init(cfg)
    img = Rng(SEED).normal((16, 24, 3))
    outs = {m: run(img, cfg.replace(ablation=m), params).tokens for m in ABLATIONS}
    assert len(outs) == 4
    for a in ABLATIONS:
        for b in ABLATIONS:
            if a < b:
                assert np.abs(outs[a] - outs[b]).max() > 1e-6, (a, b)
    views = encode_views(img, cfg, params)
    summed = np.empty_like(views.f_loc)
    for idx in np.ndindex(summed.shape):
        summed[idx] = views.f_loc[idx] + views.f_glo[idx]
    pooled = dual_pool(summed, views.feature_grid)
    want = linear(pooled.reshape(-1, pooled.shape[-1]), params.projector)
    assert np.array_equal(outs["dcm_add"], want)


@pytest.mark.acceptance("AC9 serialization")
def test_serialization(tmp_path, capsys):
    gen = np.random.default_rng(SEED)
    path = tmp_path / "t.dpt"
    for k in range(1000):
        rank = int(gen.integers(0, 5))
        shape = tuple(int(s) for s in gen.integers(0 if k % 50 == 0 else 1, 5, size=rank))
        arr = gen.standard_normal(shape).astype(np.float32)
        if arr.size and k % 7 == 0:
            arr.flat[0] = [np.float32(-0.0), np.float32(np.inf), np.float32(1e-45)][k % 3]
        dio.write_tensor(path, arr)
        first = path.read_bytes()
        back = dio.read_tensor(path)
        assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
        dio.write_tensor(path, back)
        assert path.read_bytes() == first

    img = gen.integers(0, 256, (16, 24, 3), dtype=np.uint8)
    src = tmp_path / "img.ppm"
    dio.write_ppm(src, img)
    want = dio.load_image(src, "reject", (8, 8)).astype(np.float32)
    for mode in ("local", "global"):
        crops = tmp_path / f"crops_{mode}"
        out = tmp_path / f"back_{mode}.dpt"
        assert main(["crop", "--mode", mode, "--encoder-res", "8", "8",
                     "--in", str(src), "--out", str(crops)]) == 0
        assert main(["recombine", "--mode", mode, "--in", str(crops), "--out", str(out)]) == 0
        assert dio.read_tensor(out).tobytes() == want.tobytes()


@pytest.mark.acceptance("AC10 determinism")
def test_determinism(tmp_path, capsys):
    src = tmp_path / "img.ppm"
    dio.write_ppm(src, np.random.default_rng(SEED).integers(0, 256, (16, 16, 3), dtype=np.uint8))
    outs = []
    for k in range(2):
        out = tmp_path / f"tokens_{k}.dpt"
        assert main(["pipeline", "--seed", str(SEED), "--in", str(src), "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert len(outs[0]) > 0
