import numpy as np
import pytest
import torch

from latentpinn import autoenc, grf
from latentpinn.autoenc import AeConfig
from latentpinn.errors import ValidationError
from latentpinn.tensorio import load_bundle

from oracles import kl_loop

SMALL = dict(d_z=8, enc_blocks=2, image_size=16, base_channels=8, max_channels=16, batch_size=8)


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ae_data")
    return grf.build_dataset(40, grf.GrfParams(n=16, seed=3), out_dir=root)


def test_full_scale_code_dimension():
    cfg = AeConfig(d_z=96, enc_blocks=5, image_size=128)
    params = autoenc.init_params(cfg)
    code = autoenc.encode_images(params, cfg, torch.zeros(2, 1, 128, 128))
    assert code.mu.shape == (2, 96) and code.logvar.shape == (2, 96)


def test_desk_code_dimension_and_determinism():
    cfg = AeConfig()
    params = autoenc.init_params(cfg)
    x = torch.rand(1, 1, 64, 64) * 2 - 1
    a = autoenc.encode_images(params, cfg, x)
    b = autoenc.encode_images(params, cfg, x.clone())
    assert a.z.shape == (1, 16)
    assert torch.equal(a.z, b.z) and torch.equal(a.logvar, b.logvar)


def test_config_validation():
    with pytest.raises(ValidationError):
        AeConfig(image_size=60)
    with pytest.raises(ValidationError):
        AeConfig(d_z=0)


def test_reparameterize_zero_noise_limit():
    mu = torch.tensor([[0.3, -1.0]])
    code = autoenc.LatentCode(torch.tanh(mu), mu, torch.full((1, 2), -1e9))
    torch.testing.assert_close(autoenc.reparameterize(code, 0), torch.tanh(mu), rtol=0, atol=1e-4)


def test_reparameterize_seeded():
    mu = torch.randn(3, 5)
    code = autoenc.LatentCode(torch.tanh(mu), mu, torch.zeros(3, 5))
    assert torch.equal(autoenc.reparameterize(code, 7), autoenc.reparameterize(code, 7))


def test_reparameterize_monte_carlo_mean():
    n = 10_000
    mu = torch.full((n, 1), 0.4, dtype=torch.float64)
    logvar = torch.full((n, 1), np.log(0.25), dtype=torch.float64)
    z = autoenc.reparameterize(autoenc.LatentCode(torch.tanh(mu), mu, logvar), 1).numpy()[:, 0]
    ref = np.tanh(0.4 + 0.5 * np.random.default_rng(99).standard_normal(400_000))
    se = np.sqrt(z.var() / n + ref.var() / ref.size)
    assert abs(z.mean() - ref.mean()) < 3 * se


def test_decode_range_and_determinism():
    cfg = AeConfig(**SMALL)
    params = autoenc.init_params(cfg)
    grid = grf.to_velocity(grf.sample_grf(grf.GrfParams(n=16)))
    z = np.random.default_rng(0).uniform(-1, 1, (6, 8)) * 50
    out = autoenc.decode(params, cfg, z, grid)
    again = autoenc.decode(params, cfg, z, grid)
    for f, g in zip(out, again):
        assert f.values.min() >= 2.0 and f.values.max() <= 6.0
        np.testing.assert_array_equal(f.values, g.values)


def test_ae_loss_cases():
    v = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    zero = torch.zeros(3, 2, dtype=torch.float64)
    total, rec, kl = autoenc.ae_loss(v, v, zero, zero, 1.0)
    assert total.item() == 0.0
    _, _, kl = autoenc.ae_loss(v, v, torch.ones(1, 1), torch.zeros(1, 1), 1.0)
    assert kl.item() == pytest.approx(0.5)
    rng = np.random.default_rng(4)
    mu, lv = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    vh = v + 0.1
    _, rec, kl = autoenc.ae_loss(v, vh, torch.as_tensor(mu), torch.as_tensor(lv), 0.3)
    assert abs(kl.item() - kl_loop(mu, lv)) < 1e-10
    assert abs(rec.item() - float(np.mean((v.numpy() - vh.numpy()) ** 2))) < 1e-10
    total0, rec0, _ = autoenc.ae_loss(v, vh, torch.as_tensor(mu), torch.as_tensor(lv), 0.0)
    assert total0.item() == rec0.item()


def test_kl_nonnegative():
    rng = np.random.default_rng(5)
    for _ in range(100):
        mu, lv = rng.standard_normal((2, 4)) * 3, rng.standard_normal((2, 4)) * 3
        _, _, kl = autoenc.ae_loss(torch.zeros(1), torch.zeros(1), torch.as_tensor(mu), torch.as_tensor(lv), 1.0)
        assert kl.item() >= 0


def test_training_writes_metrics_and_metadata(small_data, tmp_path):
    cfg = AeConfig(**SMALL, epochs=30)
    res = autoenc.train_autoencoder(small_data, cfg, tmp_path)
    h = res.history
    assert len(h) == 30 and h[-1]["recon_loss"] < 0.5 * h[0]["recon_loss"]
    header = (tmp_path / "ae_metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(autoenc.METRICS_COLUMNS)
    meta = load_bundle(res.checkpoint).metadata
    for key in ("d_z", "enc_blocks", "kl_weight", "velocity_range", "dataset_hash"):
        assert key in meta
    model = autoenc.load_autoencoder(res.checkpoint)
    assert model.fingerprint() == res.model.fingerprint()


def test_resume_reproduces_next_epoch(small_data, tmp_path):
    cfg = AeConfig(**SMALL, epochs=4)
    full = autoenc.train_autoencoder(small_data, cfg, tmp_path / "full").history
    autoenc.train_autoencoder(small_data, cfg, tmp_path / "cut", stop_after=2)
    resumed = autoenc.train_autoencoder(small_data, cfg, tmp_path / "cut", resume=True).history
    assert len(resumed) == 4
    assert abs(resumed[2]["recon_loss"] - full[2]["recon_loss"]) <= 1e-7
    assert resumed[3]["recon_loss"] == full[3]["recon_loss"]


def test_kl_weight_zero_trains(small_data, tmp_path):
    cfg = AeConfig(**SMALL, epochs=2, kl_weight=0.0)
    res = autoenc.train_autoencoder(small_data, cfg, tmp_path)
    assert all(np.isfinite(r["recon_loss"]) for r in res.history)


def test_wrong_image_size(small_data, tmp_path):
    with pytest.raises(ValidationError):
        autoenc.train_autoencoder(small_data, AeConfig(epochs=1), tmp_path)
