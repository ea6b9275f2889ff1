import json

import numpy as np
import pytest
from scipy.optimize import nnls

from stainmtl.color import from_matrix, od_to_rgb, rgb_to_od, to_matrix
from stainmtl.exceptions import InsufficientTissue, InvalidInput
from stainmtl.stainsep import (
    EOSIN,
    HEMATOXYLIN,
    SeparationConfig,
    StainProfile,
    canonical_order,
    density_percentile,
    estimate_stains,
    fit_profile,
    nnls_project,
    normalize_spcn,
    reconstruct,
    stain_densities,
    tissue_mask,
)
from stainmtl.synthetic import make_density, make_patch, random_stain_matrix

from conftest import cosine_match, white_image

EXACT = SeparationConfig(sparsity=0.0)


def test_tissue_mask_background_only():
    od = to_matrix(rgb_to_od(white_image()))
    assert not tissue_mask(od).any()


def test_tissue_mask_zero_threshold():
    img = white_image((4, 4))
    img[0, 0] = (254, 255, 255)
    img[2, 3] = (100, 90, 200)
    mask = tissue_mask(to_matrix(rgb_to_od(img)), 0.0)
    assert mask.sum() == 2 and mask[0] and mask[2 * 4 + 3]


def test_tissue_mask_matches_norm_oracle(rng):
    od = rng.uniform(0, 0.2, (3, 500))
    mask = tissue_mask(od, 0.15)
    oracle = [sum(float(x) ** 2 for x in od[:, j]) ** 0.5 > 0.15 for j in range(500)]
    assert mask.tolist() == oracle


def test_nnls_project_matches_scipy(rng):
    W = random_stain_matrix(3)
    X = rng.uniform(0, 1.5, (3, 200))
    H = nnls_project(W, X)
    for j in range(X.shape[1]):
        ref, _ = nnls(W, X[:, j])
        assert H[:, j] == pytest.approx(ref, abs=1e-10)


def test_nnls_project_three_stains(rng):
    W = random_stain_matrix(4, n_stains=3)
    X = rng.uniform(0, 1.5, (3, 100))
    H = nnls_project(W, X)
    for j in range(X.shape[1]):
        ref, _ = nnls(W, X[:, j])
        assert H[:, j] == pytest.approx(ref, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_recover_two_stains(seed):
    rgb, W, _ = make_patch((32, 32), seed)
    sep = estimate_stains(to_matrix(rgb_to_od(rgb)), SeparationConfig(sparsity=0.0, seed=seed))
    assert cosine_match(W, sep.stain_matrix) >= 0.99


def test_single_stain_exact_direction():
    direction = np.array([0.3, 0.8, 0.5])
    rng = np.random.default_rng(3)
    H = rng.uniform(0.2, 1.5, (1, 400))
    od = np.outer(direction, H)
    sep = estimate_stains(od, SeparationConfig(n_stains=1, sparsity=0.0))
    w = sep.stain_matrix[:, 0]
    assert w @ direction / np.linalg.norm(direction) >= 1 - 1e-9


def test_blank_patch_insufficient_tissue():
    with pytest.raises(InsufficientTissue):
        estimate_stains(to_matrix(rgb_to_od(white_image())))


def test_insufficient_tissue_boundary():
    od = np.zeros((3, 100))
    od[:, :19] = np.outer(HEMATOXYLIN, np.ones(19))
    with pytest.raises(InsufficientTissue) as info:
        estimate_stains(od)
    assert info.value.n_tissue == 19 and info.value.n_required == 20
    od[:, 19] = HEMATOXYLIN
    estimate_stains(od)


def test_invariants_and_monotone_objective(he_patch):
    rgb, _, _ = he_patch
    for lam in (0.0, 0.001, 0.1):
        sep = estimate_stains(to_matrix(rgb_to_od(rgb)), SeparationConfig(sparsity=lam))
        W, H = sep.stain_matrix, sep.density
        assert np.all(W >= 0) and np.all(H >= 0) and np.all(np.isfinite(H))
        assert np.linalg.norm(W, axis=0) == pytest.approx([1.0, 1.0], abs=1e-9)
        assert np.all(np.diff(sep.objective) <= 1e-9)
        assert sep.n_iter == len(sep.objective) - 1


def test_exact_rank_reconstruction_error():
    rng = np.random.default_rng(11)
    W = random_stain_matrix(rng)
    H = make_density((32, 32), rng)
    X = W @ H
    tissue = np.linalg.norm(X, axis=0) > 0.15
    sep = estimate_stains(X, EXACT)
    R = X[:, tissue] - sep.stain_matrix @ sep.density[:, tissue]
    assert np.linalg.norm(R) / np.linalg.norm(X[:, tissue]) <= 0.05


def test_deterministic(he_patch):
    od = to_matrix(rgb_to_od(he_patch[0]))
    a = estimate_stains(od, SeparationConfig(seed=5))
    b = estimate_stains(od, SeparationConfig(seed=5))
    assert np.array_equal(a.stain_matrix, b.stain_matrix)
    assert np.array_equal(a.density, b.density)


def test_canonical_order_hematoxylin_first(he_patch):
    sep = estimate_stains(to_matrix(rgb_to_od(he_patch[0])))
    assert sep.stain_matrix[:, 0] @ HEMATOXYLIN > sep.stain_matrix[:, 1] @ HEMATOXYLIN
    W = np.stack([EOSIN, HEMATOXYLIN], axis=1)
    assert canonical_order(W).tolist() == [1, 0]


def test_canonical_order_tie_break():
    v = np.array([0.5, 0.7, 0.5]) / np.linalg.norm([0.5, 0.7, 0.5])
    mirrored = 2 * (v @ HEMATOXYLIN) * HEMATOXYLIN - v  # same angle to hematoxylin
    assert np.all(mirrored >= 0)
    W = np.stack([v, mirrored], axis=1)
    cos = HEMATOXYLIN @ W
    assert cos[0] == pytest.approx(cos[1], abs=1e-15)
    first = 0 if v[0] > mirrored[0] else 1
    assert canonical_order(W)[0] == first


def test_config_validation():
    with pytest.raises(InvalidInput):
        SeparationConfig(n_stains=4)
    with pytest.raises(InvalidInput):
        SeparationConfig(sparsity=-1)
    with pytest.raises(InvalidInput):
        SeparationConfig(max_iter=0)


def test_reconstruct_cases(rng):
    assert np.array_equal(reconstruct(np.ones((3, 2)), np.zeros((2, 5))), np.zeros((3, 5)))
    e1 = np.array([[1.0], [0.0], [0.0]])
    out = reconstruct(e1, np.ones((1, 4)))
    assert np.array_equal(out, np.vstack([np.ones(4), np.zeros(4), np.zeros(4)]))
    W = rng.uniform(0, 1, (3, 2))
    H = rng.uniform(0, 2, (2, 7))
    out = reconstruct(W, H)
    for i in range(3):
        for j in range(7):
            acc = 0.0
            for k in range(2):
                acc += W[i, k] * H[k, j]
            assert out[i, j] == pytest.approx(acc, abs=1e-12)
    with pytest.raises(InvalidInput):
        reconstruct(np.ones((3, 2)), np.ones((3, 4)))


def test_density_percentile():
    assert density_percentile(np.full((1, 10), 0.7))[0] == 0.7
    row = np.arange(1, 101, dtype=float)[None, ::-1]
    assert density_percentile(row, 99)[0] == 99.0
    assert density_percentile(row, 100)[0] == 100.0
    # nearest rank, no interpolation: ceil(0.5 * 3) = 2nd smallest
    assert density_percentile(np.array([[3.0, 1.0, 2.0]]), 50)[0] == 2.0
    with pytest.raises(InvalidInput):
        density_percentile(row, 0)


def test_fit_profile_two_stains(he_patch):
    rgb, W, _ = he_patch
    prof = fit_profile(rgb, SeparationConfig(sparsity=0.0))
    assert cosine_match(W, prof.stains) >= 0.99
    assert np.all(prof.density_scale > 0)


def test_fit_profile_single_stain_scale():
    # ramp with a plateau at 2.0 covering more than 1% of the pixels
    dens = np.linspace(0.3, 2.3, 32 * 32).clip(max=2.0)
    od = np.outer(HEMATOXYLIN, dens)
    rgb = od_to_rgb(from_matrix(od, (32, 32)))
    prof = fit_profile(rgb, SeparationConfig(n_stains=1))
    assert prof.density_scale[0] == pytest.approx(2.0, rel=0.01)


def test_fit_profile_blank():
    with pytest.raises(InsufficientTissue):
        fit_profile(white_image())


@pytest.mark.parametrize("seed", range(4))
def test_self_normalization_near_identity(seed):
    rgb, _, _ = make_patch((32, 32), 100 + seed)
    cfg = SeparationConfig(seed=seed)
    out = normalize_spcn(rgb, fit_profile(rgb, cfg), cfg)
    err = np.abs(out.astype(int) - rgb)
    assert err.mean() <= 1 and err.max() <= 3


def test_background_stays_white(he_patch):
    rgb, _, _ = he_patch
    cfg = SeparationConfig()
    target = fit_profile(make_patch((32, 32), 3)[0], cfg)
    out = normalize_spcn(rgb, target, cfg)
    background = rgb.min(axis=-1) >= 250
    assert background.any()
    assert out[background].min() >= 240


def test_swapped_target_gives_identical_output(he_patch):
    rgb, _, _ = he_patch
    cfg = SeparationConfig()
    target = fit_profile(make_patch((32, 32), 4)[0], cfg)
    swapped = StainProfile(target.stains[:, ::-1], target.density_scale[::-1])
    assert np.array_equal(normalize_spcn(rgb, target, cfg), normalize_spcn(rgb, swapped, cfg))


def test_normalization_preserves_density_structure(he_patch):
    rgb, _, _ = he_patch
    cfg = SeparationConfig()
    target = fit_profile(make_patch((32, 32), 4)[0], cfg)
    _, H_src, _ = stain_densities(rgb, cfg)
    ratio = target.density_scale / density_percentile(H_src)
    expected = od_to_rgb(from_matrix(target.stains @ (H_src * ratio[:, None]), rgb.shape[:2]))
    assert np.array_equal(normalize_spcn(rgb, target, cfg), expected)


def test_profile_shape_mismatch(he_patch):
    target = StainProfile(np.ones((3, 1)) / np.sqrt(3), [1.0])
    with pytest.raises(InvalidInput):
        normalize_spcn(he_patch[0], target, SeparationConfig())


def test_profile_json_round_trip(tmp_path):
    W = np.array([[0.6, 0.1], [0.7, 0.9], [0.3, 0.4]])
    prof = StainProfile(W, [1.5, 0.8])
    path = tmp_path / "p.json"
    prof.to_json(path)
    data = json.loads(path.read_text())
    assert data["m"] == 3 and data["r"] == 2
    assert data["columns"] == [0.6, 0.7, 0.3, 0.1, 0.9, 0.4]  # column-major
    back = StainProfile.from_json(path)
    assert np.array_equal(back.stains, W)
    assert np.array_equal(back.density_scale, prof.density_scale)


def test_profile_rejects_bad_data():
    with pytest.raises(InvalidInput):
        StainProfile.from_dict({"m": 3, "r": 2, "columns": [1.0], "density_scale": [1, 1]})
    with pytest.raises(InvalidInput):
        StainProfile(np.ones((3, 2)), [1.0, 0.0])
