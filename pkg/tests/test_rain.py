import numpy as np
import pytest

from dpaf import rain


def _correlate_loop(img, kernel):
    """Reference correlation with zero padding, center at k // 2."""
    kh, kw = kernel.shape
    cy, cx = kh // 2, kw // 2
    h, w = img.shape
    out = np.zeros_like(img)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for i in range(kh):
                for j in range(kw):
                    yy, xx = y + i - cy, x + j - cx
                    if 0 <= yy < h and 0 <= xx < w:
                        acc += img[yy, xx] * kernel[i, j]
            out[y, x] = acc
    return out


def test_line_kernel_axis_aligned():
    horiz = rain.line_kernel(3, 0.0)
    np.testing.assert_allclose(horiz, np.array([[0, 0, 0],
                                                [1, 1, 1],
                                                [0, 0, 0]]) / 3.0, atol=1e-12)
    vert = rain.line_kernel(5, 90.0)
    expected = np.zeros((5, 5))
    expected[:, 2] = 0.2
    np.testing.assert_allclose(vert, expected, atol=1e-12)


def test_line_kernel_normalized_for_any_angle():
    for angle in (0.0, 17.0, 45.0, 63.5, 90.0, 120.0):
        for length in (1, 2, 3, 6, 9):
            k = rain.line_kernel(length, angle)
            assert k.shape == (length, length)
            assert abs(k.sum() - 1.0) < 1e-12
            assert k.min() >= 0.0
    with pytest.raises(ValueError):
        rain.line_kernel(0, 45.0)


def test_streak_layer_matches_loop_correlation_oracle():
    for seed, length, angle in [(0, 3, 80.0), (1, 5, 100.0), (7, 5, 60.0)]:
        layer = rain.render_streak_layer((12, 12), angle, 0.15, length, 0.8, seed)
        rng = np.random.default_rng(seed)
        noise = (rng.random((12, 12)) < 0.15).astype(np.float64)
        blurred = _correlate_loop(noise, rain.line_kernel(length, angle))
        expected = np.clip(blurred * (0.8 / blurred.max()), 0.0, 0.8)
        np.testing.assert_allclose(layer.pixels, expected, atol=1e-12)


def test_streak_layer_full_density_unit_length_is_constant():
    layer = rain.render_streak_layer((10, 14), 45.0, 1.0, 1, 0.6, seed=2)
    assert np.all(layer.pixels == 0.6)


def test_streak_layer_empty_when_density_zero():
    layer = rain.render_streak_layer((10, 10), 90.0, 0.0, 5, 0.9, seed=4)
    assert np.all(layer.pixels == 0.0)


def test_streak_layer_rejects_bad_params():
    with pytest.raises(ValueError):
        rain.render_streak_layer((8, 8), 90.0, 1.5, 5, 0.5, seed=0)
    with pytest.raises(ValueError):
        rain.render_streak_layer((8, 8), 90.0, 0.1, 0, 0.5, seed=0)
    with pytest.raises(ValueError):
        rain.render_streak_layer((8, 8), 90.0, 0.1, 5, 0.0, seed=0)


def test_compose_additive_matches_elementwise_oracle():
    rng = np.random.default_rng(5)
    clean = rng.random((9, 11, 3))
    layer = rain.render_streak_layer((9, 11), 85.0, 0.3, 3, 0.9, seed=6)
    out = rain.compose_additive(clean, layer)
    for y in range(9):
        for x in range(11):
            for c in range(3):
                assert out[y, x, c] == min(clean[y, x, c] + layer.pixels[y, x], 1.0)


def test_compose_heavy_reduces_to_additive_when_clear():
    rng = np.random.default_rng(8)
    clean = rng.random((10, 10, 3))
    layer = rain.render_streak_layer((10, 10), 70.0, 0.2, 3, 0.7, seed=9)
    params = rain.RainParams(transmittance=1.0, layers=[layer],
                             region_mask=np.ones((10, 10)),
                             atmospheric_light=np.array([0.9, 0.9, 0.9]))
    heavy = rain.compose_heavy(clean, params)
    additive = rain.compose_additive(clean, layer)
    assert np.array_equal(heavy, additive)


def test_compose_heavy_full_haze_is_ambient():
    rng = np.random.default_rng(10)
    clean = rng.random((6, 6, 3))
    layer = rain.render_streak_layer((6, 6), 90.0, 0.4, 3, 0.8, seed=11)
    ambient = np.array([0.75, 0.8, 0.85])
    params = rain.RainParams(transmittance=0.0, layers=[layer],
                             region_mask=np.ones((6, 6)),
                             atmospheric_light=ambient)
    out = rain.compose_heavy(clean, params)
    assert np.array_equal(out, np.broadcast_to(ambient, out.shape))


def test_compose_heavy_masks_streaks_outside_region():
    clean = np.full((8, 8, 3), 0.3)
    layer = rain.render_streak_layer((8, 8), 90.0, 1.0, 1, 0.5, seed=12)
    mask = np.zeros((8, 8))
    mask[:4] = 1.0
    params = rain.RainParams(transmittance=1.0, layers=[layer],
                             region_mask=mask,
                             atmospheric_light=np.array([0.8, 0.8, 0.8]))
    out = rain.compose_heavy(clean, params)
    assert np.all(out[:4] == 0.8)   # 0.3 + 0.5
    assert np.all(out[4:] == 0.3)


def test_compose_heavy_validates_inputs():
    clean = np.zeros((6, 6, 3))
    layer = rain.render_streak_layer((6, 6), 90.0, 0.3, 3, 0.5, seed=13)
    good_mask = np.ones((6, 6))
    ambient = np.array([0.8, 0.8, 0.8])
    with pytest.raises(ValueError):
        rain.compose_heavy(clean, rain.RainParams(1.5, [layer], good_mask, ambient))
    with pytest.raises(ValueError):
        rain.compose_heavy(clean, rain.RainParams(0.9, [], good_mask, ambient))
    with pytest.raises(ValueError):
        rain.compose_heavy(clean, rain.RainParams(0.9, [layer], np.ones((5, 6)), ambient))
    with pytest.raises(ValueError):
        rain.compose_heavy(clean, rain.RainParams(0.9, [layer], good_mask * 0.5, ambient))
    bad_layer = rain.render_streak_layer((5, 6), 90.0, 0.3, 3, 0.5, seed=13)
    with pytest.raises(ValueError):
        rain.compose_heavy(clean, rain.RainParams(0.9, [bad_layer], good_mask, ambient))


def test_region_mask_is_binary_with_requested_coverage():
    rng = np.random.default_rng(14)
    mask = rain.make_region_mask((64, 64), 0.75, rng)
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert abs(mask.mean() - 0.75) < 0.02
    full = rain.make_region_mask((16, 16), 1.0, np.random.default_rng(15))
    assert np.all(full == 1.0)


def test_training_patch_is_aligned_window_and_deterministic():
    h, w, p = 20, 24, 8
    base = (np.arange(h * w, dtype=np.float64).reshape(h, w) / (h * w))
    clean = np.stack([base, base, base], axis=-1)
    pair = rain.RainyPair(rainy=np.clip(clean + 0.25, 0, 1), clean=clean,
                          params=None, seed=0)
    rainy_c, clean_c = rain.sample_training_patch(pair, p, seed=21, hflip=False)
    assert rainy_c.shape == (p, p, 3) and clean_c.shape == (p, p, 3)
    # locate the window from its top-left value and check it is a pure slice
    flat = clean_c[0, 0, 0] * h * w
    oy, ox = int(round(flat)) // w, int(round(flat)) % w
    np.testing.assert_array_equal(clean_c, clean[oy:oy + p, ox:ox + p])
    again = rain.sample_training_patch(pair, p, seed=21, hflip=False)
    assert np.array_equal(again[0], rainy_c) and np.array_equal(again[1], clean_c)
    with pytest.raises(ValueError):
        rain.sample_training_patch(pair, 32, seed=0, hflip=False)


def test_training_patch_flip_keeps_pair_aligned():
    rng = np.random.default_rng(22)
    clean = rng.random((16, 16, 3)) * 0.7      # keep +0.25 below the clip point
    pair = rain.RainyPair(rainy=np.clip(clean + 0.25, 0, 1), clean=clean,
                          params=None, seed=0)
    saw_flip = saw_plain = False
    for seed in range(20):
        rainy_c, clean_c = rain.sample_training_patch(pair, 8, seed=seed, hflip=True)
        np.testing.assert_allclose(rainy_c - clean_c, 0.25, atol=1e-12)
        plain_r, _ = rain.sample_training_patch(pair, 8, seed=seed, hflip=False)
        if np.array_equal(rainy_c, plain_r):
            saw_plain = True
        elif np.array_equal(rainy_c, plain_r[:, ::-1]):
            saw_flip = True
        else:
            raise AssertionError("flipped crop is neither the window nor its mirror")
    assert saw_flip and saw_plain


def test_render_pair_deterministic_in_seed():
    ranges = rain.RainRanges(length_px=(3, 5))
    a = rain.render_pair((24, 24), ranges, seed=30)
    b = rain.render_pair((24, 24), ranges, seed=30)
    c = rain.render_pair((24, 24), ranges, seed=31)
    assert np.array_equal(a.rainy, b.rainy) and np.array_equal(a.clean, b.clean)
    assert not np.array_equal(a.rainy, c.rainy)
    assert a.rainy.min() >= 0.0 and a.rainy.max() <= 1.0
    # rain only brightens or hazes; pairs must differ
    assert not np.array_equal(a.rainy, a.clean)


def test_pair_seed_depends_on_both_inputs():
    assert rain.pair_seed(7, 0) == rain.pair_seed(7, 0)
    assert rain.pair_seed(7, 0) != rain.pair_seed(7, 1)
    assert rain.pair_seed(7, 0) != rain.pair_seed(8, 0)


def test_png_round_trip_quantization(tmp_path):
    rng = np.random.default_rng(33)
    img = rng.random((17, 13, 3))
    path = tmp_path / "x.png"
    rain.save_png(path, img)
    back = rain.load_png(path)
    assert np.max(np.abs(back - img)) <= 0.5 / 255.0 + 1e-12
    rain.save_png(path, back)
    assert np.array_equal(rain.load_png(path), back)


def test_generate_and_regenerate_byte_identical(tmp_path):
    ranges = rain.RainRanges(length_px=(3, 5), n_layers=(1, 2))
    src = tmp_path / "a"
    dup = tmp_path / "b"
    manifest_path = rain.generate_dataset(3, (24, 24), ranges, seed=77, out_dir=str(src))
    manifest = rain.load_manifest(manifest_path)
    assert manifest["format"] == rain.MANIFEST_FORMAT
    assert len(manifest["pairs"]) == 3
    rain.regenerate_from_manifest(manifest_path, str(dup))
    for rec in manifest["pairs"]:
        for key in ("rainy", "clean"):
            original = (src / rec[key]).read_bytes()
            rebuilt = (dup / rec[key]).read_bytes()
            assert original == rebuilt, f"pair {rec['index']} {key} differs"


def test_load_pairs_matches_saved_files(tmp_path):
    ranges = rain.RainRanges(length_px=(3, 3), n_layers=(1, 1))
    manifest_path = rain.generate_dataset(2, (16, 16), ranges, seed=5, out_dir=str(tmp_path))
    pairs = rain.load_pairs(manifest_path)
    assert [idx for idx, _, _ in pairs] == [0, 1]
    for _, rainy, clean in pairs:
        assert rainy.shape == (16, 16, 3) and clean.shape == (16, 16, 3)
        assert rainy.min() >= 0.0 and rainy.max() <= 1.0


def test_manifest_rejects_unknown_format(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        rain.load_manifest(str(bad))


def test_rain_ranges_round_trip_and_unknown_keys():
    ranges = rain.RainRanges(density=(0.02, 0.03))
    back = rain.RainRanges.from_dict(ranges.to_dict())
    assert back == ranges
    with pytest.raises(ValueError):
        rain.RainRanges.from_dict({"densityy": [0.1, 0.2]})


def test_import_paired_folder(tmp_path):
    rainy_dir = tmp_path / "rainy"
    clean_dir = tmp_path / "clean"
    rainy_dir.mkdir()
    clean_dir.mkdir()
    rng = np.random.default_rng(40)
    for i in range(2):
        rain.save_png(rainy_dir / f"{i}.png", rng.random((12, 12, 3)))
        rain.save_png(clean_dir / f"{i}.png", rng.random((12, 12, 3)))
    out = tmp_path / "ds"
    manifest_path = rain.import_paired_folder(str(rainy_dir), str(clean_dir), str(out))
    pairs = rain.load_pairs(manifest_path)
    assert len(pairs) == 2
    # imported pairs carry no generator seed, so re-rendering must refuse
    with pytest.raises(ValueError):
        rain.regenerate_from_manifest(manifest_path, str(tmp_path / "re"))
    rain.save_png(rainy_dir / "extra.png", rng.random((12, 12, 3)))
    with pytest.raises(ValueError):
        rain.import_paired_folder(str(rainy_dir), str(clean_dir), str(out))
