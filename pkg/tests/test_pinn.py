import numpy as np
import pytest
import torch

from latentpinn import autoenc, diffnet, fmm, grf, pinn
from latentpinn.autoenc import AeConfig
from latentpinn.errors import TrainingError, ValidationError
from latentpinn.pinn import PinnConfig
from latentpinn.tensorio import ScalarField2D

from oracles import central_difference_stable, relative_errors, unexpanded_residual

TINY = dict(d_z=8, hidden_layers=2, hidden_width=16, n_collocation=128, batch_points=32,
            n_velocities=4, epochs=3)


def _grid(n, values=2.0):
    return ScalarField2D(np.broadcast_to(values, (n, n)), 5.0 / (n - 1), 1.0 / (n - 1))


@pytest.fixture(scope="module")
def tiny_setup(tmp_path_factory):
    root = tmp_path_factory.mktemp("pinn")
    data = grf.build_dataset(40, grf.GrfParams(n=16, seed=5), out_dir=root / "data")
    cfg = AeConfig(d_z=8, enc_blocks=2, image_size=16, base_channels=8, max_channels=16, epochs=3)
    ae = autoenc.train_autoencoder(data, cfg, root / "ae")
    return data, ae.model, ae.checkpoint, root


# ------------------------------------------------------------ inputs


def test_input_dimensions():
    assert PinnConfig(d_z=96).in_dim == 100
    assert PinnConfig(d_z=16).in_dim == 20
    assert PinnConfig(d_z=0).in_dim == 4


def test_corners_normalize_to_unit_box():
    g = _grid(8)
    coords = np.array([[0.0, 0.0], [5.0, 1.0], [0.0, 1.0], [5.0, 0.0]])
    b = pinn.CollocationBatch(coords, fmm.SourceSpec(0.0, 0.0), np.zeros(0), np.full(4, 2.0),
                              np.zeros(4), np.zeros((4, 2)), 2.0, g.extent)
    rows = pinn.assemble_inputs(b, torch.float64).numpy()
    np.testing.assert_array_equal(rows[:, :2], [[-1, -1], [1, 1], [-1, 1], [1, -1]])
    np.testing.assert_array_equal(rows[:, 2:4], [[-1, -1]] * 4)


def test_full_scale_config_echo():
    cfg = PinnConfig(d_z=96, n_collocation=9830, batch_points=163, n_velocities=100, epochs=10000)
    assert cfg.in_dim == 100 and cfg.iterations_per_epoch == 61
    assert PinnConfig.from_json(cfg.to_json()) == cfg
    g = _grid(128)
    nodes = pinn.collocation_nodes(g, cfg.replace(exclude_cells=5.0))
    assert nodes.size == 9830 and np.unique(nodes).size == 9830


def test_config_validation():
    with pytest.raises(ValidationError):
        PinnConfig(n_collocation=100, batch_points=101)
    with pytest.raises(ValidationError):
        PinnConfig(hidden_width=0)
    with pytest.raises(ValidationError):
        PinnConfig(lr0=0.0)


def test_collocation_excludes_source_neighbourhood():
    g = _grid(32)
    cfg = PinnConfig(n_collocation=500, exclude_cells=5.0)
    nodes = pinn.collocation_nodes(g, cfg)
    r = fmm.source_distance(g, cfg.src).ravel()[nodes]
    assert r.min() > 5 * max(g.dx, g.dz)
    np.testing.assert_array_equal(nodes, pinn.collocation_nodes(g, cfg))
    with pytest.raises(ValidationError):
        pinn.collocation_nodes(g, cfg.replace(n_collocation=32 * 32))


# ---------------------------------------------------------- residual


def test_residual_constant_medium_fixpoint():
    rng = np.random.default_rng(0)
    n = 50
    r = pinn.factored_residual(np.ones(n), np.zeros((n, 2)), rng.uniform(0, 2, n),
                               rng.standard_normal((n, 2)), np.full(n, 3.0), 3.0)
    np.testing.assert_array_equal(r, 0.0)


def test_residual_heterogeneous_tau_one():
    rng = np.random.default_rng(1)
    n = 50
    v_hat = rng.uniform(2, 6, n)
    r = pinn.factored_residual(np.ones(n), np.zeros((n, 2)), rng.uniform(0, 2, n),
                               rng.standard_normal((n, 2)), v_hat, 2.5)
    np.testing.assert_allclose(r, 1 / 2.5 ** 2 - 1 / v_hat ** 2, rtol=0, atol=1e-15)


def test_residual_expanded_matches_unexpanded():
    rng = np.random.default_rng(2)
    n = 10_000
    v_src = 3.0
    ang = rng.uniform(0, 2 * np.pi, n)
    g0 = np.stack([np.cos(ang), np.sin(ang)], axis=1) / v_src
    tau, gt = rng.uniform(0.5, 1.5, n), rng.standard_normal((n, 2))
    t0, v_hat = rng.uniform(0, 2, n), rng.uniform(2, 6, n)
    r = pinn.factored_residual(tau, gt, t0, g0, v_hat, v_src)
    ref = unexpanded_residual(tau, gt[:, 0], gt[:, 1], t0, g0[:, 0], g0[:, 1], v_hat)
    assert np.max(np.abs(r - ref)) < 1e-10


def _constant_batch(n=16, v=2.0, d_z=0):
    g = _grid(n, v)
    src = fmm.SourceSpec()
    cfg = PinnConfig(d_z=d_z, n_collocation=100, batch_points=20)
    return pinn.make_batch(g, pinn.collocation_nodes(g, cfg), src, np.zeros(d_z)), cfg


def _constant_one_params(spec):
    params = diffnet.init_mlp(spec, 0, dtype=torch.float64, output_bias=1.0)
    last = f"layer{spec.hidden_layers}/weight"
    params[last] = torch.zeros_like(params[last])
    return params


def test_loss_zero_for_exact_solution():
    batch, cfg = _constant_batch(d_z=3)
    spec = cfg.replace(hidden_layers=2, hidden_width=8).mlp_spec()
    loss = pinn.pinn_loss(_constant_one_params(spec), spec, batch)
    assert abs(loss.item()) < 1e-14


def test_source_weight_zero_is_mean_residual_squared():
    rng = np.random.default_rng(3)
    g = _grid(16).with_values(rng.uniform(2, 6, (16, 16)))
    cfg = PinnConfig(d_z=0, n_collocation=100, batch_points=20, hidden_layers=2, hidden_width=8)
    batch = pinn.make_batch(g, pinn.collocation_nodes(g, cfg), cfg.src)
    spec = cfg.mlp_spec()
    params = _constant_one_params(spec)
    loss = pinn.pinn_loss(params, spec, batch, source_weight=0.0).item()
    r = 1 / batch.v_src ** 2 - 1 / batch.v_hat ** 2
    assert abs(loss - np.mean(r ** 2)) < 1e-12
    with_src = pinn.pinn_loss(diffnet.init_mlp(spec, 1, dtype=torch.float64), spec, batch, 1.0).item()
    without = pinn.pinn_loss(diffnet.init_mlp(spec, 1, dtype=torch.float64), spec, batch, 0.0).item()
    assert with_src > without


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    g = _grid(12).with_values(rng.uniform(2, 6, (12, 12)))
    cfg = PinnConfig(d_z=2, n_collocation=30, batch_points=10, hidden_layers=2, hidden_width=6)
    batch = pinn.make_batch(g, pinn.collocation_nodes(g, cfg), cfg.src, [0.3, -0.2])
    spec = cfg.mlp_spec()
    params = diffnet.init_mlp(spec, 2, dtype=torch.float64, output_bias=1.0)
    grads = diffnet.grad_params(lambda p: pinn.pinn_loss(p, spec, batch, 1.0, True), params)
    for name, p in params.items():
        def f(arr, name=name):
            q = dict(params)
            q[name] = torch.as_tensor(arr)
            return pinn.pinn_loss(q, spec, batch, 1.0, True).item()
        fd = central_difference_stable(f, p.numpy())
        assert relative_errors(grads[name].numpy(), fd).max(initial=0) < 1e-4, name


def test_nan_loss_raises_with_fingerprint():
    batch, cfg = _constant_batch()
    spec = cfg.replace(hidden_layers=1, hidden_width=4).mlp_spec()
    params = diffnet.init_mlp(spec, 0, dtype=torch.float64)
    params["layer0/bias"][0] = float("nan")
    with pytest.raises(TrainingError, match="batch [0-9a-f]{12}"):
        pinn.pinn_loss(params, spec, batch)


# --------------------------------------------------- reconstruction


def test_reconstruct_constant_velocity():
    g = _grid(128)
    src = fmm.SourceSpec()
    t = g.with_values(fmm.source_distance(g, src) / 2.0)
    rec = pinn.reconstruct_velocity(t, src)
    v = rec.velocity.values[rec.valid]
    assert rec.valid.sum() > 0.9 * g.values.size
    assert np.max(np.abs(v - 2.0) / 2.0) < 0.02
    scaled = pinn.reconstruct_velocity(t.with_values(3.0 * t.values), src)
    np.testing.assert_allclose(scaled.velocity.values[rec.valid], v / 3.0, rtol=1e-12)


def test_reconstruct_flags_flat_nodes():
    g = _grid(8)
    rec = pinn.reconstruct_velocity(g.with_values(np.zeros((8, 8))))
    assert not rec.valid.any() and np.all(rec.velocity.values == 0)


def test_reconstruct_fmm_of_grf():
    v = grf.sample_velocity(grf.GrfParams(n=64, seed=11), 0)
    src = fmm.SourceSpec()
    t = fmm.solve_eikonal(v, src)
    assert pinn.median_velocity_error(t, v, src) < 0.10


# ------------------------------------------------------------ ranking


def test_rank_by_latent_distance():
    codes = [np.array([2.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 0.0])]
    assert pinn.rank_by_latent_distance([0.0, 0.0], codes) == [2, 1, 0]
    assert pinn.rank_by_latent_distance([0.0], [[1.0], [-1.0], [0.5]]) == [2, 0, 1]
    rng = np.random.default_rng(6)
    arr = rng.standard_normal((30, 4))
    ref = sorted(range(30), key=lambda k: (float(np.linalg.norm(arr[k] - arr[7])), k))
    assert pinn.rank_by_latent_distance(arr[7], arr) == ref
    with pytest.raises(ValidationError):
        pinn.rank_by_latent_distance([0.0, 1.0], [[1.0]])


def test_epochs_to_reach():
    assert pinn.epochs_to_reach([3.0, 2.0, 1.0], 2.0) == 1
    assert pinn.epochs_to_reach([3.0, 2.0], 0.5) is None


# ----------------------------------------------------------- training


def test_traveltime_zero_at_source_node():
    # On a 17x17 grid the default source (2.5, 0.5) is a grid node.
    g = _grid(17, 3.0)
    cfg = PinnConfig(d_z=0, hidden_layers=2, hidden_width=8)
    model = pinn.PinnModel(diffnet.init_mlp(cfg.mlp_spec(), 0, output_bias=1.0), cfg)
    t = pinn.predict_traveltime(model, g)
    i, j = g.nearest_node(*cfg.src.as_tuple())
    assert g.coordinate(i, j) == cfg.src.as_tuple()
    assert t.values[i, j] == 0.0 and np.all(t.values[np.arange(17) != i] != 0.0)


def test_vanilla_constant_medium_converges():
    g = _grid(32)
    cfg = PinnConfig(d_z=0, hidden_layers=3, hidden_width=32, n_collocation=512, batch_points=128,
                     lr0=1e-3, epochs=100)
    res = pinn.train_vanilla_pinn(g, cfg)
    assert len(res.curve) == 101
    assert min(res.curve) < 1e-4


def test_vanilla_determinism_and_transfer_copy():
    rng = np.random.default_rng(8)
    g = _grid(16).with_values(rng.uniform(2, 6, (16, 16)))
    cfg = PinnConfig(d_z=0, hidden_layers=2, hidden_width=16, n_collocation=128, batch_points=32)
    a = pinn.train_vanilla_pinn(g, cfg, epochs=5)
    b = pinn.train_vanilla_pinn(g, cfg, epochs=5)
    assert a.curve == b.curve
    c = pinn.train_vanilla_pinn(g, cfg, init=a.params, epochs=0)
    assert c.curve[0] == a.curve[-1]
    assert all(torch.equal(c.params[k], a.params[k]) for k in a.params)


def test_latent_training_and_zero_shot(tiny_setup, tmp_path):
    data, ae, ae_path, _ = tiny_setup
    cfg = PinnConfig(**TINY)
    res = pinn.train_latent_pinn(data, ae_path, cfg, tmp_path)
    assert [h["epoch"] for h in res.history] == [0, 1, 2]
    model = pinn.load_pinn(res.checkpoint)
    assert model.cfg == cfg and model.train_ids == data.indices("train")[:4]
    v = data.load(data.indices("test")[0])
    before = diffnet.optimizer_step_count()
    t = pinn.infer_traveltime(res.checkpoint, ae_path, v)
    assert diffnet.optimizer_step_count() == before
    assert t.shape == v.shape and np.all(np.isfinite(t.values))
    rows = pinn.evaluate(model, ae, data, "test", limit=2, out_csv=tmp_path / "eval.csv")
    assert pinn.read_eval_csv(tmp_path / "eval.csv") == rows
    assert sorted(r.latent_distance_rank for r in rows) == [0, 1]


def test_latent_training_resume_reproduces(tiny_setup, tmp_path):
    data, ae, _, _ = tiny_setup
    cfg = PinnConfig(**TINY)
    full = pinn.train_latent_pinn(data, ae, cfg, tmp_path / "a", checkpoint_every=1).history
    pinn.train_latent_pinn(data, ae, cfg, tmp_path / "b", stop_after=2, checkpoint_every=1)
    resumed = pinn.train_latent_pinn(data, ae, cfg, tmp_path / "b", resume=True).history
    assert abs(resumed[2]["loss"] - full[2]["loss"]) <= 1e-7


def test_mixed_batches_and_jitter_run(tiny_setup):
    data, ae, _, _ = tiny_setup
    cfg = PinnConfig(**TINY).replace(mixed_batches=True, latent_jitter=0.05, epochs=2)
    res = pinn.train_latent_pinn(data, ae, cfg)
    assert all(np.isfinite(h["loss"]) for h in res.history)


def test_single_velocity_degenerates_to_vanilla(tiny_setup):
    data, ae, _, _ = tiny_setup
    cfg = PinnConfig(**TINY).replace(n_velocities=1, epochs=20)
    latent = pinn.train_latent_pinn(data, ae, cfg).history
    v_hat = ae.decode(ae.encode(data.load(data.indices("train")[0])).z[0].double().numpy())
    vanilla = pinn.train_vanilla_pinn(v_hat, cfg, epochs=20).history
    ratio = latent[-1]["loss"] / vanilla[-1]["loss"]
    assert 1 / 3 < ratio < 3


def test_incompatible_checkpoints(tiny_setup, tmp_path):
    data, ae, ae_path, _ = tiny_setup
    with pytest.raises(ValidationError):
        pinn.train_latent_pinn(data, ae, PinnConfig(**TINY).replace(d_z=4))
    res = pinn.train_latent_pinn(data, ae, PinnConfig(**TINY).replace(epochs=1))
    with pytest.raises(ValidationError):
        pinn.infer_traveltime(res.model, ae, _grid(32))
    with pytest.raises(ValidationError):
        pinn.infer_traveltime(res.model, ae, data.load(0), fmm.SourceSpec(1.0, 0.5))
