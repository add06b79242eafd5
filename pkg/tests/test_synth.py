import numpy as np
import pytest

from bgl.lowlight.synth import (
    CAM_FROM_RGB,
    IDENTITY_CCM,
    RawImage,
    SynthConfig,
    load_dataset,
    mosaic_rggb,
    naive_demosaic,
    pack_bayer,
    procedural_image,
    save_dataset,
    synthesize_dataset,
    unpack_bayer,
    unprocess_synthesize,
)


def test_pack_2x2():
    m = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(pack_bayer(m).ravel(), [1, 2, 3, 4])


def test_pack_shape_and_round_trip():
    m = np.random.default_rng(0).random((1, 8, 8))
    np.testing.assert_array_equal(unpack_bayer(pack_bayer(m)), m)
    assert pack_bayer(np.zeros((1, 16, 16))).shape == (4, 8, 8)


@pytest.mark.parametrize("shape", [(1, 3, 4), (1, 4, 5), (2, 4, 4)])
def test_pack_rejects_bad_shapes(shape):
    with pytest.raises(ValueError):
        pack_bayer(np.zeros(shape))


def test_disabled_stages_are_a_rearrangement():
    clean = np.random.default_rng(1).random((3, 8, 8))
    raw, ref = unprocess_synthesize(clean, 1.0, (0.0, 0.0), seed=0, gamma=1.0, ccm=IDENTITY_CCM)
    np.testing.assert_array_equal(raw.planes, pack_bayer(mosaic_rggb(clean)))
    np.testing.assert_array_equal(ref, clean)


def test_gray_linear_scaling():
    raw, _ = unprocess_synthesize(np.full((3, 4, 4), 0.5), 0.1, (0.0, 0.0), seed=0, gamma=1.0, ccm=IDENTITY_CCM)
    np.testing.assert_allclose(raw.planes, 0.05, rtol=0, atol=1e-16)


def test_colour_matrix_keeps_gray():
    np.testing.assert_allclose(CAM_FROM_RGB.sum(axis=1), 1.0)
    raw, _ = unprocess_synthesize(np.full((3, 4, 4), 0.5), 0.2, (0.0, 0.0), seed=0)
    np.testing.assert_allclose(raw.planes, 0.2 * 0.5 ** 2.2, rtol=1e-14)


def test_noise_variance_monte_carlo():
    shot, read, level, gain = 1e-3, 1e-2, 0.6, 0.5
    signal = level * gain
    samples = []
    for seed in range(1000):
        raw, _ = unprocess_synthesize(np.full((3, 4, 4), level), gain, (shot, read), seed=seed,
                                      gamma=1.0, ccm=IDENTITY_CCM)
        samples.append(raw.planes.ravel())
    var = np.var(np.concatenate(samples))
    expected = shot * signal + read ** 2
    assert abs(var - expected) / expected < 0.10


def test_synthesis_is_deterministic():
    clean = procedural_image(np.random.default_rng(3), 16)
    a, _ = unprocess_synthesize(clean, 0.2, (1e-3, 5e-3), seed=42)
    b, _ = unprocess_synthesize(clean, 0.2, (1e-3, 5e-3), seed=42)
    assert a.planes.tobytes() == b.planes.tobytes()


@pytest.mark.parametrize("kwargs", [{"gain": 0.0}, {"gain": 1.5}, {"noise": (-1.0, 0.0)}])
def test_unprocess_errors(kwargs):
    args = {"gain": 0.5, "noise": (0.0, 0.0)} | kwargs
    with pytest.raises(ValueError):
        unprocess_synthesize(np.zeros((3, 4, 4)), args["gain"], args["noise"], seed=0)


def test_unprocess_odd_dims():
    with pytest.raises(ValueError):
        unprocess_synthesize(np.zeros((3, 5, 4)), 0.5, (0.0, 0.0), seed=0)


def test_raw_image_invariants():
    with pytest.raises(ValueError):
        RawImage(np.zeros((3, 2, 2)), 0.5, (0.0, 0.0))
    with pytest.raises(ValueError):
        RawImage(-np.ones((4, 2, 2)), 0.5, (0.0, 0.0))


def test_naive_demosaic_constant():
    planes = np.stack([np.full((2, 2), v) for v in (0.1, 0.2, 0.4, 0.3)])
    rgb = naive_demosaic(planes)
    assert rgb.shape == (3, 4, 4)
    np.testing.assert_allclose(rgb[:, 0, 0], [0.1, 0.3, 0.3])


def test_procedural_image_range():
    img = procedural_image(np.random.default_rng(0), 32)
    assert img.shape == (3, 32, 32) and img.min() >= 0 and img.max() <= 1
    assert img.std() > 0.05


def small_cfg(seed=0):
    return SynthConfig(image_size=16, n_train=6, n_val=3, n_test=3, seed=seed)


def test_dataset_determinism_and_splits():
    a, b = synthesize_dataset(small_cfg()), synthesize_dataset(small_cfg())
    assert a.raw.tobytes() == b.raw.tobytes() and a.clean.tobytes() == b.clean.tobytes()
    assert len(a) == 12
    assert [a.indices(s).size for s in ("train", "val", "test")] == [6, 3, 3]
    lo, hi = small_cfg().gain_range
    assert np.all((a.gains >= lo) & (a.gains <= hi))
    assert synthesize_dataset(small_cfg(1)).raw.tobytes() != a.raw.tobytes()


def test_dataset_independent_of_thread_count(monkeypatch):
    one = synthesize_dataset(small_cfg(), threads=1)
    monkeypatch.setenv("BGL_THREADS", "3")
    many = synthesize_dataset(small_cfg())
    assert one.raw.tobytes() == many.raw.tobytes()


def test_dataset_save_load(tmp_path):
    ds = synthesize_dataset(small_cfg())
    save_dataset(ds, tmp_path / "d", png=True)
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.raw, ds.raw)
    np.testing.assert_array_equal(back.clean, ds.clean)
    assert back.records == ds.records
    assert len(list((tmp_path / "d" / "png").glob("*.png"))) == 2 * len(ds)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(image_size=15)
    with pytest.raises(ValueError):
        SynthConfig(gain_range=(0.5, 0.2))
