"""Command-line batch driver.

Every subcommand reads a TOML run configuration with one ``[section]`` per
component, writes its outputs under ``--out`` together with the fully
resolved configuration (``resolved_config.toml``), and returns exit code 0
on success, 1 on validation or usage errors and 2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from . import fmm, grf, ldm, pinn
from .autoenc import AeConfig, load_autoencoder, train_autoencoder
from .errors import LatentPinnError, ValidationError
from .tensorio import ScalarField2D

log = logging.getLogger(__name__)

COMMANDS = ("gen-data", "train-ae", "train-pinn", "train-baseline", "train-ldm", "eval", "sample", "plot")
# Subcommands that only consume checkpoints may run from path flags alone.
CONFIG_OPTIONAL = ("eval", "sample", "plot")
RESOLVED_NAME = "resolved_config.toml"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"


@dataclasses.dataclass(frozen=True)
class DatasetSection:
    count: int = 500
    split_fracs: tuple = (0.8, 0.1, 0.1)
    velocity_range: tuple = grf.DEFAULT_VELOCITY_RANGE
    workers: int = 1


@dataclasses.dataclass(frozen=True)
class PathsSection:
    data: str = ""
    ae: str = ""
    pinn: str = ""
    ldm: str = ""


@dataclasses.dataclass(frozen=True)
class BaselineSection:
    split: str = "test"
    sample: int = 0
    epochs: int = 500
    init: str = ""


@dataclasses.dataclass(frozen=True)
class EvalSection:
    split: str = "test"
    limit: int = 0
    backend: str = ""


@dataclasses.dataclass(frozen=True)
class SampleSection:
    count: int = 16
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class PlotSection:
    split: str = "test"
    count: int = 3
    curves: tuple = ()


SECTIONS = {
    "grf": grf.GrfParams,
    "dataset": DatasetSection,
    "ae": AeConfig,
    "pinn": pinn.PinnConfig,
    "ldm": ldm.LdmConfig,
    "baseline": BaselineSection,
    "eval": EvalSection,
    "sample": SampleSection,
    "plot": PlotSection,
    "paths": PathsSection,
}


class UsageError(ValidationError):
    """Bad command-line usage."""


@dataclasses.dataclass
class RunConfig:
    sections: dict

    def __getattr__(self, name):
        try:
            return self.sections[name]
        except KeyError:
            raise AttributeError(name) from None

    def to_toml(self) -> dict:
        doc = {}
        for name, obj in self.sections.items():
            doc[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items()}
        return doc


def _build_section(name: str, values: dict):
    cls = SECTIONS[name]
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValidationError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    kw = {}
    for k, v in values.items():
        if isinstance(v, dict):
            raise ValidationError(f"[{name}].{k}: nested tables are not supported")
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ValidationError(f"[{name}]: {exc}") from None


def load_config(path=None, seed: int | None = None, overrides: dict | None = None) -> RunConfig:
    """Parse a run configuration; unknown sections or keys are rejected.

    ``seed`` replaces the ``seed`` key of every section that has one.
    ``overrides`` maps ``section -> {key: value}``.
    """
    doc: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: invalid TOML: {exc}") from None
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ValidationError(f"unknown section(s): {', '.join(unknown)}")
    for key, val in doc.items():
        if not isinstance(val, dict):
            raise ValidationError(f"top-level key {key!r} must be a [section]")
    for sec, vals in (overrides or {}).items():
        doc.setdefault(sec, {}).update({k: v for k, v in vals.items() if v is not None})
    if seed is not None:
        for sec, cls in SECTIONS.items():
            if "seed" in {f.name for f in dataclasses.fields(cls)}:
                doc.setdefault(sec, {})["seed"] = int(seed)
    return RunConfig({name: _build_section(name, doc.get(name, {})) for name in SECTIONS})


def write_config(cfg: RunConfig, path) -> None:
    with open(path, "wb") as fh:
        tomli_w.dump(cfg.to_toml(), fh)


# ------------------------------------------------------------------ plots

def render_field(field: ScalarField2D, path, overlay: ScalarField2D | None = None,
                 reference: ScalarField2D | None = None, title: str = "", levels: int = 12) -> Path:
    """Write a colour raster of ``field`` as PNG (plus a CSV of its values).

    ``overlay`` is contoured with solid black lines and ``reference`` with
    dashed yellow lines on the same levels.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not np.all(np.isfinite(field.values)):
        raise ValidationError("cannot render a non-finite field")
    path = Path(path)
    x0, x1, z0, z1 = field.extent
    fig, ax = plt.subplots(figsize=(6, 3.2))
    im = ax.imshow(field.values, extent=(x0, x1, z1, z0), cmap="viridis", aspect="auto",
                   interpolation="nearest")
    fig.colorbar(im, ax=ax)
    X, Z = field.mesh()
    lev = None
    for fld, style in ((overlay, dict(colors="k", linestyles="solid")),
                       (reference, dict(colors="yellow", linestyles="dashed"))):
        if fld is None:
            continue
        if not fld.same_grid(field):
            raise ValidationError("overlay lives on a different grid")
        if lev is None:
            lo, hi = float(fld.values.min()), float(fld.values.max())
            lev = np.linspace(lo, hi, levels + 2)[1:-1] if hi > lo else None
        if lev is not None:
            ax.contour(X, Z, fld.values, levels=lev, linewidths=1.0, **style)
    ax.set_xlabel("x (km)")
    ax.set_ylabel("z (km)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    np.savetxt(path.with_suffix(".csv"), field.values, delimiter=",", fmt="%.9g")
    return path


def compare_costs(curves: dict, latent_point: tuple[int, float], path) -> tuple[Path, Path]:
    """Plot epoch-vs-loss curves with the zero-shot latent PINN point marked.

    ``curves`` maps a label to a sequence of losses indexed by epoch. The
    CSV has columns ``curve, epoch, loss``; the latent point uses the label
    ``latent_pinn``.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not curves:
        raise ValidationError("compare_costs needs at least one baseline curve")
    path = Path(path)
    csv_path = path.with_suffix(".csv")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "epoch", "loss"])
        for label, losses in curves.items():
            losses = [float(v) for v in losses]
            ax.semilogy(range(len(losses)), losses, label=label)
            for k, v in enumerate(losses):
                w.writerow([label, k, repr(v)])
        ep, loss = int(latent_point[0]), float(latent_point[1])
        ax.semilogy([ep], [loss], marker="*", markersize=14, linestyle="none", color="tab:blue",
                    label="latent PINN")
        w.writerow(["latent_pinn", ep, repr(loss)])
    ax.set_xlabel("epoch")
    ax.set_ylabel("PDE loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path, csv_path


def read_cost_csv(path) -> tuple[dict, tuple[int, float]]:
    """Inverse of the CSV written by :func:`compare_costs`."""
    curves: dict = {}
    point = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["curve"] == "latent_pinn":
                point = (int(row["epoch"]), float(row["loss"]))
            else:
                curves.setdefault(row["curve"], []).append(float(row["loss"]))
    return curves, point


# ------------------------------------------------------------ subcommands

def _data_root(cfg: RunConfig, args) -> Path:
    root = args.data or cfg.paths.data
    return Path(root) if root else grf.default_data_root()


def _require(value: str, what: str) -> str:
    if not value:
        raise UsageError(f"no {what} given (use the flag or the [paths] section)")
    return value


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> None:
    d = cfg.dataset
    m = grf.build_dataset(d.count, cfg.grf, d.split_fracs, out, d.velocity_range, d.workers)
    log.info("wrote %d fields to %s", len(m.sample_paths), out)


def cmd_train_ae(cfg: RunConfig, args, out: Path) -> None:
    m = grf.load_manifest(_data_root(cfg, args))
    res = train_autoencoder(m, cfg.ae, out, resume=args.resume)
    log.info("autoencoder checkpoint %s", res.checkpoint)


def cmd_train_pinn(cfg: RunConfig, args, out: Path) -> None:
    m = grf.load_manifest(_data_root(cfg, args))
    ae = _require(args.ae or cfg.paths.ae, "autoencoder checkpoint")
    res = pinn.train_latent_pinn(m, ae, cfg.pinn, out, resume=args.resume)
    log.info("latent PINN checkpoint %s", res.checkpoint)


def cmd_train_baseline(cfg: RunConfig, args, out: Path) -> None:
    m = grf.load_manifest(_data_root(cfg, args))
    b = cfg.baseline
    ids = m.indices(b.split)
    if not 0 <= b.sample < len(ids):
        raise ValidationError(f"[baseline].sample={b.sample} outside split {b.split!r} of size {len(ids)}")
    v = m.load(ids[b.sample])
    res = pinn.train_vanilla_pinn(v, cfg.pinn, init=b.init or None, epochs=b.epochs, out_dir=out)
    with open(out / "baseline_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for k, val in enumerate(res.curve):
            w.writerow([k, repr(float(val))])
    log.info("vanilla PINN final loss %.3e", res.curve[-1])


def cmd_train_ldm(cfg: RunConfig, args, out: Path) -> None:
    m = grf.load_manifest(_data_root(cfg, args))
    ae = load_autoencoder(_require(args.ae or cfg.paths.ae, "autoencoder checkpoint"))
    z = ldm.encoder_latents(ae, m, "train")
    res = ldm.train_ldm(z, cfg.ldm, out)
    log.info("diffusion checkpoint %s final loss %.3e", res.checkpoint, res.history[-1]["loss"] if res.history else float("nan"))


def cmd_eval(cfg: RunConfig, args, out: Path) -> None:
    m = grf.load_manifest(_data_root(cfg, args))
    model = pinn.load_pinn(_require(args.pinn or cfg.paths.pinn, "PINN checkpoint"))
    ae = load_autoencoder(_require(args.ae or cfg.paths.ae, "autoencoder checkpoint"))
    e = cfg.eval
    split = args.split or e.split
    rows = pinn.evaluate(model, ae, m, split, e.limit or None, out / "eval.csv", e.backend or None)
    if rows:
        log.info("%s: mean rel_l1 %.4f over %d fields", split, float(np.mean([r.rel_l1 for r in rows])), len(rows))


def cmd_sample(cfg: RunConfig, args, out: Path) -> None:
    ae = load_autoencoder(_require(args.ae or cfg.paths.ae, "autoencoder checkpoint"))
    model = _require(args.ldm or cfg.paths.ldm, "diffusion checkpoint")
    s = cfg.sample
    flds = ldm.sample_fields(model, ae, s.count, s.seed)
    ldm.write_sampled_dataset(flds, out, ae.velocity_range, s.seed)
    log.info("wrote %d sampled fields to %s", len(flds), out)


def cmd_plot(cfg: RunConfig, args, out: Path) -> None:
    m = grf.load_manifest(_data_root(cfg, args))
    model = pinn.load_pinn(_require(args.pinn or cfg.paths.pinn, "PINN checkpoint"))
    ae = load_autoencoder(_require(args.ae or cfg.paths.ae, "autoencoder checkpoint"))
    p = cfg.plot
    split = args.split or p.split
    first_v = None
    for i in m.indices(split)[: p.count]:
        v = m.load(i)
        first_v = first_v or v
        t_hat = pinn.infer_traveltime(model, ae, v)
        t_ref = fmm.solve_eikonal(v, model.cfg.src)
        render_field(v, out / f"field_{i:06d}.png", overlay=t_hat, reference=t_ref, title=f"sample {i}")
    if p.curves:
        if first_v is None:
            raise ValidationError(f"split {split!r} is empty")
        curves = {}
        for c in p.curves:
            with open(c, newline="") as fh:
                curves[Path(c).stem] = [float(r["loss"]) for r in csv.DictReader(fh)]
        point = (0, pinn.latent_loss_on(model, ae, first_v))
        compare_costs(curves, point, out / "costs.png")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-pinn": cmd_train_pinn,
    "train-baseline": cmd_train_baseline,
    "train-ldm": cmd_train_ldm,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "plot": cmd_plot,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="latentpinn", description="Latent PINN experiment driver")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override every seed in the configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")
        p.add_argument("--data", help="dataset root (default $%s)" % grf.DATA_ENV)
        p.add_argument("--ae", help="autoencoder checkpoint")
        p.add_argument("--pinn", help="latent PINN checkpoint")
        p.add_argument("--ldm", help="diffusion checkpoint")
        p.add_argument("--split", help="dataset split")
        p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
        p.add_argument("--log-level", default="INFO")
    return parser


def _prepare_out(args) -> Path:
    if args.out:
        out = Path(args.out)
    elif args.command == "gen-data":
        out = grf.default_data_root()
    else:
        raise UsageError("--out is required")
    if out.exists() and any(out.iterdir()) and not (args.force or args.resume):
        raise ValidationError(f"output directory {out} is not empty (pass --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                            format=LOG_FORMAT, stream=sys.stderr, force=True)
        if args.config is None and args.command not in CONFIG_OPTIONAL:
            raise UsageError(f"{args.command} requires --config")
        cfg = load_config(args.config, args.seed)
        out = _prepare_out(args)
        write_config(cfg, out / RESOLVED_NAME)
    except ValidationError as exc:
        if isinstance(exc, UsageError):
            parser.print_usage(sys.stderr)
        print(f"latentpinn: error: {exc}", file=sys.stderr)
        return 1
    try:
        HANDLERS[args.command](cfg, args, out)
    except ValidationError as exc:
        log.error("%s", exc)
        return 1
    except (LatentPinnError, OSError, RuntimeError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
