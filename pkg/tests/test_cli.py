import csv

import numpy as np
import pytest
from matplotlib import image as mpimg

from latentpinn import cli, grf, pinn
from latentpinn.errors import ValidationError
from latentpinn.tensorio import ScalarField2D, load_bundle

TINY_TOML = """
[grf]
n = 16
seed = 2

[dataset]
count = 30

[ae]
d_z = 4
enc_blocks = 2
image_size = 16
base_channels = 8
max_channels = 16
epochs = 2

[pinn]
d_z = 4
hidden_layers = 2
hidden_width = 16
n_collocation = 64
batch_points = 32
n_velocities = 2
epochs = 2

[ldm]
steps = 50
hidden_layers = 1
hidden_width = 16
epochs = 2

[baseline]
epochs = 3

[eval]
limit = 2

[sample]
count = 2

[plot]
count = 1
"""


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.toml"
    cfg.write_text(TINY_TOML)
    d = {"root": root, "cfg": cfg, "data": root / "data"}
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(d["data"])]) == 0
    assert cli.main(["train-ae", "--config", str(cfg), "--data", str(d["data"]), "--out", str(root / "ae")]) == 0
    d["ae"] = root / "ae" / "ae.lpnb"
    assert cli.main(["train-pinn", "--config", str(cfg), "--data", str(d["data"]), "--ae", str(d["ae"]),
                     "--out", str(root / "pinn")]) == 0
    d["pinn"] = root / "pinn" / "pinn.lpnb"
    return d


def _rel_files(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def test_gen_data_and_resolved_echo(pipeline, tmp_path):
    data = pipeline["data"]
    m = grf.load_manifest(data)
    assert len(m.sample_paths) == 30
    resolved = data / cli.RESOLVED_NAME
    assert cli.main(["gen-data", "--config", str(resolved), "--out", str(tmp_path / "again")]) == 0
    for rel in _rel_files(data):
        if rel.name in (cli.RESOLVED_NAME, "manifest.json"):
            continue
        assert (tmp_path / "again" / rel).read_bytes() == (data / rel).read_bytes()
    assert (tmp_path / "again" / cli.RESOLVED_NAME).read_bytes() == resolved.read_bytes()


def test_training_outputs(pipeline):
    root = pipeline["root"]
    assert (root / "ae" / "ae_metrics.csv").exists()
    assert (root / "pinn" / "pinn_metrics.csv").exists()
    assert load_bundle(pipeline["pinn"]).metadata["kind"] == "latent_pinn"
    cfg = cli.load_config(root / "pinn" / cli.RESOLVED_NAME)
    assert cfg.pinn.d_z == 4 and cfg.ae.image_size == 16


def test_eval_writes_report(pipeline, tmp_path):
    args = ["eval", "--pinn", str(pipeline["pinn"]), "--ae", str(pipeline["ae"]),
            "--data", str(pipeline["data"]), "--split", "test", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    with open(tmp_path / "eval.csv", newline="") as fh:
        reader = csv.DictReader(fh)
        assert tuple(reader.fieldnames) == pinn.EVAL_COLUMNS
        rows = list(reader)
    m = grf.load_manifest(pipeline["data"])
    assert len(rows) == len(m.indices("test"))
    assert all(np.isfinite(float(r["rel_l1"])) for r in rows)


def test_baseline_ldm_sample_plot(pipeline, tmp_path):
    cfg, data, ae = str(pipeline["cfg"]), str(pipeline["data"]), str(pipeline["ae"])
    assert cli.main(["train-baseline", "--config", cfg, "--data", data, "--out", str(tmp_path / "b")]) == 0
    with open(tmp_path / "b" / "baseline_curve.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert cli.main(["train-ldm", "--config", cfg, "--data", data, "--ae", ae, "--out", str(tmp_path / "l")]) == 0
    assert cli.main(["sample", "--config", cfg, "--ae", ae, "--ldm", str(tmp_path / "l" / "ldm.lpnb"),
                     "--out", str(tmp_path / "s")]) == 0
    sampled = grf.load_manifest(tmp_path / "s")
    assert sampled.generator["kind"] == "ldm" and len(sampled.sample_paths) == 2
    curve = str(tmp_path / "b" / "baseline_curve.csv")
    plot_cfg = tmp_path / "plot.toml"
    plot_cfg.write_text(f'[plot]\ncount = 1\ncurves = ["{curve}"]\n')
    assert cli.main(["plot", "--config", str(plot_cfg), "--data", data, "--ae", ae,
                     "--pinn", str(pipeline["pinn"]), "--out", str(tmp_path / "p")]) == 0
    assert list((tmp_path / "p").glob("field_*.png"))
    curves, point = cli.read_cost_csv(tmp_path / "p" / "costs.csv")
    assert point[0] == 0 and "baseline_curve" in curves


def test_refuses_overwrite_without_force(pipeline):
    args = ["gen-data", "--config", str(pipeline["cfg"]), "--out", str(pipeline["data"])]
    assert cli.main(args) == 1
    before = (pipeline["data"] / "samples" / "000000.lpnb").read_bytes()
    assert cli.main(args + ["--force"]) == 0
    assert (pipeline["data"] / "samples" / "000000.lpnb").read_bytes() == before


def test_usage_errors(tmp_path, capsys):
    assert cli.main(["train-ae", "--out", str(tmp_path / "x")]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["eval", "--bogus"]) == 1
    assert cli.main([]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[pinn]\nwidth = 3\n")
    assert cli.main(["train-pinn", "--config", str(bad), "--out", str(tmp_path / "y")]) == 1
    bad.write_text("[nosuch]\na = 1\n")
    assert cli.main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "z")]) == 1
    bad.write_text("[pinn]\nbatch_points = 9999\n")
    assert cli.main(["train-pinn", "--config", str(bad), "--out", str(tmp_path / "w")]) == 1


def test_runtime_failure_exit_code(pipeline, tmp_path):
    broken = tmp_path / "broken.lpnb"
    broken.write_bytes(b"not a bundle")
    args = ["eval", "--pinn", str(broken), "--ae", str(pipeline["ae"]), "--data", str(pipeline["data"]),
            "--out", str(tmp_path / "o")]
    assert cli.main(args) == 2


def test_seed_override_and_toml_round_trip(tmp_path):
    cfg = cli.load_config(None, seed=9)
    assert cfg.grf.seed == 9 and cfg.pinn.seed == 9 and cfg.ldm.seed == 9 and cfg.sample.seed == 9
    path = tmp_path / "c.toml"
    cli.write_config(cfg, path)
    assert cli.load_config(path).to_toml() == cfg.to_toml()


def _grid(values):
    n = values.shape[0]
    return ScalarField2D(values, 5.0 / (n - 1), 1.0 / (n - 1))


def _pixels(path):
    img = mpimg.imread(path)[..., :3]
    return (img * 255).round().astype(np.uint8)


def test_render_constant_field_is_uniform(tmp_path):
    p = cli.render_field(_grid(np.full((32, 32), 3.0)), tmp_path / "c.png")
    px = _pixels(p).reshape(-1, 3)
    colors, counts = np.unique(px, axis=0, return_counts=True)
    white = np.all(colors == 255, axis=1)
    modal = counts[~white].max()
    assert modal > 0.3 * px.shape[0]
    np.testing.assert_array_equal(np.loadtxt(p.with_suffix(".csv"), delimiter=","), 3.0)
    q = cli.render_field(_grid(np.random.default_rng(0).uniform(2, 6, (32, 32))), tmp_path / "r.png")
    _, counts_r = np.unique(_pixels(q).reshape(-1, 3), axis=0, return_counts=True)
    assert np.sort(counts_r)[-2] < 0.3 * px.shape[0]


def test_render_identical_overlay_coincides(tmp_path):
    v = _grid(np.full((64, 64), 2.0))
    X, Z = v.mesh()
    t = v.with_values(np.hypot(X - 2.5, Z - 0.5) / 2.0)
    base = _pixels(cli.render_field(v, tmp_path / "base.png"))
    solid = _pixels(cli.render_field(v, tmp_path / "solid.png", overlay=t))
    both = _pixels(cli.render_field(v, tmp_path / "both.png", overlay=t, reference=t))
    shifted = _pixels(cli.render_field(v, tmp_path / "shift.png", overlay=t,
                                       reference=t.with_values(t.values + 0.1)))
    mask_solid = np.any(solid != base, axis=2)
    extra = np.any(both != base, axis=2) & ~mask_solid
    extra_shift = np.any(shifted != base, axis=2) & ~mask_solid
    assert extra.mean() < 0.01
    assert extra_shift.mean() > extra.mean()


def test_compare_costs_round_trip(tmp_path):
    curves = {"fresh": [1.0, 0.5, 0.25], "transfer": [0.3, 0.1, 0.05]}
    png, csv_path = cli.compare_costs(curves, (0, 0.07), tmp_path / "cost.png")
    assert png.exists()
    back, point = cli.read_cost_csv(csv_path)
    assert back == curves and point == (0, 0.07)
    with pytest.raises(ValidationError):
        cli.compare_costs({}, (0, 1.0), tmp_path / "x.png")
