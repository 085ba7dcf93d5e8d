import numpy as np
import pytest

from localtrans import data
from localtrans.homography import Homography, base_corners, corner_error, dlt, psnr, warp

PLAIN = dict(augment=False)


@pytest.fixture(scope="module")
def hundred_pairs():
    return data.generate_pairs(data.GenConfig(**PLAIN), 100, master_seed=11, quantized=False)


# --- procedural source ------------------------------------------------------------------------

def test_procedural_image_is_deterministic_and_in_range():
    a, b = data.procedural_image(5, 96), data.procedural_image(5, 96)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 96, 96)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert data.procedural_image(5, (40, 70)).shape == (3, 40, 70)


def test_procedural_images_differ_between_seeds():
    diffs = [np.abs(data.procedural_image(2 * i, 64) - data.procedural_image(2 * i + 1, 64)).mean() for i in range(100)]
    assert min(diffs) > 0.01


# --- pair generation --------------------------------------------------------------------------

def test_zero_perturbation_gives_identical_images():
    pair = data.generate_pairs(data.GenConfig(rho=0.0, margin=8, **PLAIN), 3, master_seed=1)[0]
    np.testing.assert_array_equal(pair.target, pair.unaligned)
    np.testing.assert_array_equal(pair.gt_h.m, np.eye(3))


def test_unit_factor_skips_degradation(rng):
    img = rng.random((3, 16, 16))
    assert data.degrade(img, 1) is img
    assert not np.array_equal(data.degrade(img, 4), img)


def test_cross_resolution_target_is_blurred_copy():
    sharp = data.generate_pairs(data.GenConfig(patch_size=64, rho=8, margin=8, **PLAIN), 2, master_seed=4)
    blurred = data.generate_pairs(data.GenConfig(patch_size=64, rho=8, margin=8, cross_res=4, **PLAIN), 2, master_seed=4)
    for s, b in zip(sharp, blurred):
        assert b.cross_res == 4
        np.testing.assert_array_equal(s.unaligned, b.unaligned)
        assert np.abs(np.diff(b.target, axis=-1)).mean() < np.abs(np.diff(s.target, axis=-1)).mean()


def test_generated_pairs_are_self_consistent(hundred_pairs):
    values = []
    for pair in hundred_pairs:
        pair.check(rho_max=32.0)
        aligned, ok = warp(pair.unaligned, pair.gt_h, return_mask=True)
        values.append(psnr(aligned, pair.target, mask=ok))
    assert min(values) >= 45.0


def test_ground_truth_matches_offsets(hundred_pairs):
    base = base_corners(128, 128)
    for pair in hundred_pairs:
        assert np.abs(pair.gt_offsets.offsets).max() <= 32.0
        assert corner_error(pair.gt_h, dlt(base, base + pair.gt_offsets.offsets), base) <= 1e-8


def test_offset_marginals():
    rng = np.random.default_rng(0)
    base = base_corners(128, 128)
    off = np.stack([data.sample_offsets(rng, 32.0, base) for _ in range(10_000)])
    assert np.abs(off.mean(axis=0)).max() <= 1.0
    assert np.abs(off).max() <= 32.0


def test_convexity_check():
    base = base_corners(10, 10)
    assert data.is_convex_quad(base)
    assert not data.is_convex_quad(base[::-1])  # wrong orientation
    assert not data.is_convex_quad(base[[0, 2, 1, 3]])  # bow-tie


def test_invalid_configs():
    with pytest.raises(ValueError):
        data.GenConfig(cross_res=0)
    with pytest.raises(ValueError):
        data.GenConfig(source="video")
    with pytest.raises(ValueError):
        data.GenConfig(source="image-directory")
    with pytest.raises(ValueError):
        data.make_pair(np.zeros((3, 100, 100)), data.GenConfig(**PLAIN), np.random.default_rng(0))


def test_seeds_are_independent_of_count():
    assert data.sample_seeds(3, 5) == data.sample_seeds(3, 8)[:5]
    assert len(set(data.sample_seeds(3, 50))) == 50


def test_image_directory_source(tmp_path):
    from localtrans.homography import write_pnm

    write_pnm(tmp_path / "a.ppm", data.procedural_image(0, 80))
    cfg = data.GenConfig(patch_size=32, rho=8, margin=4, source="image-directory", image_dir=tmp_path, **PLAIN)
    pair = data.generate_pairs(cfg, 2, master_seed=0)[0]
    pair.check(rho_max=8)
    assert pair.target.shape == (3, 32, 32)


# --- augmentation -----------------------------------------------------------------------------

def test_degenerate_ranges_are_identity(rng):
    img = rng.random((3, 8, 8))
    np.testing.assert_array_equal(data.augment(img, rng, data.AugmentRanges.none()), img)


@pytest.mark.parametrize("seed", range(10))
def test_augment_output_is_clamped(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((3, 16, 16))
    wide = data.AugmentRanges(0.3, (0.2, 3.0), (0.2, 3.0), (0.2, 3.0))
    out = data.augment(img, rng, wide)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_grayscale_is_fixed_point_of_saturation(rng):
    gray = np.repeat(rng.random((1, 8, 8)), 3, axis=0)
    only_sat = data.AugmentRanges(0.0, (1.0, 1.0), (1.0, 1.0), (0.5, 1.5))
    np.testing.assert_allclose(data.augment(gray, rng, only_sat), gray, atol=1e-15)


# --- persistence ------------------------------------------------------------------------------

@pytest.fixture
def small_dataset(tmp_path):
    pairs = data.generate_pairs(data.GenConfig(patch_size=32, rho=8, margin=4, cross_res=4), 3, master_seed=2)
    data.write_dataset(pairs, tmp_path)
    return pairs, tmp_path


def test_dataset_round_trip(small_dataset):
    pairs, root = small_dataset
    back = data.read_dataset(root)
    assert len(back) == 3
    for a, b in zip(pairs, back):
        np.testing.assert_array_equal(a.target, b.target)
        np.testing.assert_array_equal(a.unaligned, b.unaligned)
        np.testing.assert_allclose(b.gt_h.m, a.gt_h.m, rtol=1e-15)
        np.testing.assert_array_equal(b.gt_offsets.offsets, a.gt_offsets.offsets)
        assert (b.cross_res, b.seed) == (a.cross_res, a.seed)
    assert len(data.read_dataset(root, limit=2)) == 2


def test_truncated_ground_truth_names_missing_field(small_dataset):
    _, root = small_dataset
    gt = root / "000001" / "gt.txt"
    lines = gt.read_text().splitlines()
    gt.write_text(lines[0] + "\n" + " ".join(lines[1].split()[:5]) + "\n")
    with pytest.raises(data.DatasetFormatError, match=r"offset\[5\].*byte"):
        data.read_dataset(root)


def test_unparsable_field_reports_byte_offset(small_dataset):
    _, root = small_dataset
    gt = root / "000000" / "gt.txt"
    text = gt.read_text()
    gt.write_text("abc" + text[text.index(" "):])
    with pytest.raises(data.DatasetFormatError, match=r"homography\[0\].*byte 0"):
        data.read_sample(root / "000000")


def test_singular_homography_is_an_invariant_violation(small_dataset):
    _, root = small_dataset
    gt = root / "000002" / "gt.txt"
    lines = gt.read_text().splitlines()
    lines[0] = "1 2 0 2 4 0 0 0 1"
    gt.write_text("\n".join(lines) + "\n")
    with pytest.raises(data.DatasetInvariantError, match="gt.txt"):
        data.read_sample(root / "000002")


def test_inconsistent_offsets_are_an_invariant_violation(small_dataset):
    _, root = small_dataset
    gt = root / "000000" / "gt.txt"
    lines = gt.read_text().splitlines()
    lines[0] = Homography.translation(1, 0).to_text()
    gt.write_text("\n".join(lines) + "\n")
    with pytest.raises(data.DatasetInvariantError):
        data.read_sample(root / "000000")


def test_regeneration_is_byte_identical(tmp_path):
    cfg = data.GenConfig(patch_size=32, rho=8, margin=4)
    for name in ("a", "b"):
        data.write_dataset(data.generate_pairs(cfg, 4, master_seed=9), tmp_path / name)
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files_a) == 12
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_stack_pairs(small_dataset):
    pairs, _ = small_dataset
    t, u, h = data.stack_pairs(pairs)
    assert t.shape == u.shape == (3, 3, 32, 32)
    assert h.shape == (3, 3, 3)
