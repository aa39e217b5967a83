"""Self-test and gradient-check suites behind ``dualview selftest`` / ``dualview gradcheck``."""
from dataclasses import dataclass
from typing import List

import numpy as np

from . import reference as ref
from .dem import FUSION_VARIANTS, DemParams, dem_grad_check, global_enhance, local_enhance
from .geometry import (
    GLOBAL,
    LOCAL,
    compute_grid,
    global_crop,
    global_recombine,
    local_crop,
    local_recombine,
    map_pixel,
)
from .tensor import Rng

GRIDS = ((1, 1), (2, 2), (2, 3), (3, 3))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


def _random_image(rng, w, h, c=3):
    return rng.normal((h, w, c))


def check_round_trip(seed=0, per_grid=5, enc=(4, 3)) -> CheckResult:
    rng = Rng(seed)
    bad = 0
    for n_w, n_h in GRIDS:
        grid = compute_grid(n_w * enc[0], n_h * enc[1], *enc)
        for _ in range(per_grid):
            img = _random_image(rng, grid.img_w, grid.img_h)
            ok = np.array_equal(local_recombine(local_crop(img, grid), grid), img)
            ok &= np.array_equal(global_recombine(global_crop(img, grid), grid), img)
            bad += not ok
    return CheckResult("round-trip", bad == 0, f"{bad} mismatches over {len(GRIDS) * per_grid} images")


def check_permutation(seed=0, enc=(4, 3)) -> CheckResult:
    rng = Rng(seed)
    bad = 0
    for n_w, n_h in GRIDS:
        grid = compute_grid(n_w * enc[0], n_h * enc[1], *enc)
        img = _random_image(rng, grid.img_w, grid.img_h)
        src = np.sort(img, axis=None)
        for crop in (local_crop, global_crop):
            bad += not np.array_equal(np.sort(crop(img, grid).stack(), axis=None), src)
    return CheckResult("permutation", bad == 0, f"{bad} crops changed the pixel multiset")


def check_bijection(max_side=12) -> CheckResult:
    bad = cases = 0
    for w in range(1, max_side + 1):
        for h in range(1, max_side + 1):
            for ew in (e for e in range(1, w + 1) if w % e == 0):
                for eh in (e for e in range(1, h + 1) if h % e == 0):
                    grid = compute_grid(w, h, ew, eh)
                    for persp in (LOCAL, GLOBAL):
                        hits = np.zeros((h, w), dtype=int)
                        for s in range(grid.n_sub):
                            for v in range(eh):
                                for u in range(ew):
                                    x, y = map_pixel(grid, persp, s, u, v)
                                    hits[y, x] += 1
                        bad += not np.all(hits == 1)
                        cases += 1
    return CheckResult("pixel-map bijection", bad == 0, f"{bad}/{cases} layouts not bijective")


def _dem_case(rng, n_w, n_h, tok_w, tok_h, d):
    f_glo = rng.normal((n_h * tok_h, n_w * tok_w, d))
    f_loc = rng.normal((n_h * tok_h, n_w * tok_w, d))
    grid = compute_grid(n_w * tok_w, n_h * tok_h, tok_w, tok_h)
    return f_glo, f_loc, grid


def check_attention_normalization(seed=0, draws=10, tol=1e-6) -> CheckResult:
    rng = Rng(seed)
    worst = 0.0
    for _ in range(draws):
        params = DemParams.init(8, rng)
        # scale the projections up so the softmax sees wide logits
        for br in (params.glo_branch, params.loc_branch):
            br.q = br.q * 4.0
        f_glo, f_loc, grid = _dem_case(rng, 2, 2, 2, 2, 8)
        for fn in (global_enhance, local_enhance):
            _, attn = fn(f_glo, f_loc, grid, params, return_attention=True)
            worst = max(worst, float(np.abs(attn.sum(axis=-1) - 1.0).max()))
    return CheckResult("attention normalization", worst <= tol, f"max |row sum - 1| = {worst:.3e}")


def check_oracle_equivalence(seed=0, tol=1e-10) -> CheckResult:
    rng = Rng(seed)
    worst = 0.0
    for n_w, n_h in ((1, 1), (1, 2), (2, 1), (2, 2)):
        for tok_w, tok_h in ((1, 1), (2, 1), (2, 2)):
            params = DemParams.init(4, rng)
            f_glo, f_loc, grid = _dem_case(rng, n_w, n_h, tok_w, tok_h, 4)
            g = params.glo_branch
            l = params.loc_branch
            want_g, _ = ref.naive_global_enhance(f_glo, f_loc, n_w, n_h, g.q, g.k, g.v)
            want_l, _ = ref.naive_local_enhance(f_glo, f_loc, n_w, n_h, l.q, l.k, l.v)
            worst = max(worst,
                        float(np.abs(global_enhance(f_glo, f_loc, grid, params) - want_g).max()),
                        float(np.abs(local_enhance(f_glo, f_loc, grid, params) - want_l).max()))
    return CheckResult("oracle equivalence", worst <= tol, f"max abs deviation = {worst:.3e}")


def check_global_index_set() -> CheckResult:
    grid = compute_grid(9, 12, 3, 4)
    bad = 0
    for i in range(grid.n_h):
        for j in range(grid.n_w):
            expect = ref.global_index_set(grid.img_w, grid.img_h, grid.n_w, grid.n_h, i, j)
            for (u, v), xy in expect.items():
                bad += map_pixel(grid, GLOBAL, (i, j), u, v) != xy
    return CheckResult("global index set", bad == 0, f"{bad} coordinates disagree")


def selftest(seed=0) -> List[CheckResult]:
    return [
        check_round_trip(seed),
        check_permutation(seed),
        check_bijection(),
        check_global_index_set(),
        check_attention_normalization(seed),
        check_oracle_equivalence(seed),
    ]


def gradcheck_suite(seed=0, dim=8, grid=(2, 2), tokens=(2, 2), h=1e-4, variants=FUSION_VARIANTS):
    """Gradient check of sum(F_dual) for each fusion variant; returns ``{variant: GradCheckResult}``."""
    rng = Rng(seed)
    f_glo, f_loc, g = _dem_case(rng, grid[0], grid[1], tokens[0], tokens[1], dim)
    out = {}
    for variant in variants:
        params = DemParams.init(dim, rng, variant)
        params.mix_logits = rng.normal(2)
        params.fuse_glo.bias = rng.normal(dim // 2, 0.1)
        params.fuse_loc.bias = rng.normal(dim // 2, 0.1)
        params.conv_bias = rng.normal(dim, 0.1)
        out[variant] = dem_grad_check(f_glo, f_loc, g, params, h)
    return out
