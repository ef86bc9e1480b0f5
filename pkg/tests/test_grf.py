import numpy as np
import pytest

from latentpinn import grf
from latentpinn.errors import GenerationError, ValidationError
from latentpinn.tensorio import ScalarField2D, TensorBundle, load_bundle, save_bundle, save_field

from oracles import grf_bruteforce


def test_reference_params_field_statistics():
    f = grf.sample_grf(grf.GrfParams(n=128, tau=7.0, alpha=2.5, seed=0))
    assert f.values.min() == -1.0 and f.values.max() == 1.0
    assert abs(f.values.mean()) < 0.15


def test_zero_noise_is_degenerate():
    with pytest.raises(GenerationError):
        grf.sample_grf(grf.GrfParams(n=8), np.zeros((8, 8), dtype=complex))


def test_matches_bruteforce_dft():
    rng = np.random.default_rng(3)
    noise = grf.white_noise(8, rng)
    got = grf.sample_grf(grf.GrfParams(n=8, tau=7.0, alpha=2.5), noise).values
    ref = grf_bruteforce(noise, 7.0, 2.5)
    assert np.max(np.abs(got - ref)) <= 1e-10 * np.max(np.abs(ref))


@pytest.mark.parametrize("x,v", [(-1.0, 2.0), (0.0, 4.0), (1.0, 6.0)])
def test_velocity_map(x, v):
    assert grf.image_to_velocity(np.array(x)) == v


def test_velocity_map_round_trip():
    x = np.linspace(-1, 1, 101)
    np.testing.assert_allclose(grf.velocity_to_image(grf.image_to_velocity(x)), x, atol=1e-12)


def test_to_velocity_rejects_out_of_range():
    with pytest.raises(ValidationError):
        grf.to_velocity(ScalarField2D(np.full((4, 4), 1.5), 1.0, 1.0))


def test_split_sizes():
    assert grf.split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    assert grf.split_sizes(50000, (0.78, 0.02, 0.20)) == (39000, 1000, 10000)


def test_build_dataset_deterministic_and_disjoint(tmp_path):
    p = grf.GrfParams(n=16, seed=5)
    m1 = grf.build_dataset(10, p, out_dir=tmp_path / "a")
    m2 = grf.build_dataset(10, p, out_dir=tmp_path / "b")
    sizes = [len(m1.indices(s)) for s in grf.SPLITS]
    assert sizes == [8, 1, 1]
    seen = sum((m1.indices(s) for s in grf.SPLITS), [])
    assert sorted(seen) == list(range(10))
    for i in range(10):
        assert m1.path(i).read_bytes() == m2.path(i).read_bytes()
        v = m1.load(i).values
        assert v.min() >= 2.0 and v.max() <= 6.0
    back = grf.load_manifest(tmp_path / "a")
    assert back.indices("train") == m1.indices("train")


def test_statistical_sanity():
    p = grf.GrfParams(n=64, seed=11)
    imgs = np.stack([grf.sample_grf(p, grf.white_noise(64, np.random.default_rng([11, i]))).values
                     for i in range(200)])
    assert abs(imgs.mean()) < 0.05
    flat = imgs.reshape(200, -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    flat /= np.linalg.norm(flat, axis=1, keepdims=True)
    corr = flat @ flat.T
    off = corr[~np.eye(200, dtype=bool)]
    assert off.mean() < 0.2


def test_pure_function_of_params_and_noise():
    p = grf.GrfParams(n=16)
    noise = grf.white_noise(16, np.random.default_rng(0))
    a = grf.sample_grf(p, noise).values
    b = grf.sample_grf(p, noise.copy()).values
    np.testing.assert_array_equal(a, b)


def test_ingest_folder(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    rng = np.random.default_rng(0)
    for k in range(3):
        save_field(ScalarField2D(rng.uniform(2, 6, (8, 8)), 0.1, 0.1), src / f"f{k}.lpnb")
    m = grf.ingest_folder(src)
    assert len(m.sample_paths) == 3


def test_ingest_empty_folder(tmp_path):
    with pytest.raises(ValidationError):
        grf.ingest_folder(tmp_path)


def test_ingest_raw_images_rescaled(tmp_path):
    src = tmp_path / "raw"
    src.mkdir()
    img = np.linspace(-1, 1, 64).reshape(8, 8)
    save_bundle(TensorBundle({"v": img}, {"kind": "image"}), src / "r.lpnb")
    m = grf.ingest_folder(src, velocity_range=(2.0, 6.0))
    v = m.load(0).values
    assert v.min() == pytest.approx(2.0) and v.max() == pytest.approx(6.0)
    np.testing.assert_allclose(v, 2.0 * (img + 2.0), atol=1e-12)
    assert load_bundle(m.path(0))["v"].shape == (8, 8)
