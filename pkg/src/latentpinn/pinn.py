"""Latent-conditioned factored-eikonal PINN.

The network maps ``[x, z, x_s, z_s, latent...]`` (coordinates normalized to
[-1, 1]) to the multiplicative correction ``tau`` in ``T = T0 * tau`` with
``T0 = |x - x_s| / v(x_s)``. Training draws one velocity per iteration
through its latent code; inference on a new velocity is a forward pass only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import diffnet, fmm
from .autoenc import AeModel, _atomic_save, epoch_generator, load_autoencoder
from .diffnet import MlpSpec, NetworkParams
from .errors import TrainingError, ValidationError
from .grf import DatasetManifest
from .tensorio import ScalarField2D, TensorBundle, load_bundle

log = logging.getLogger(__name__)

N_SOURCE_INPUTS = 4  # x, z, x_s, z_s
EVAL_COLUMNS = ("sample_id", "split", "latent_distance_rank", "rel_l1", "rel_l2", "max_rel",
                "vrec_median_rel_err")
METRICS_COLUMNS = ("epoch", "loss", "lr", "wall_time_s")
# The factored residual is invariant under tau -> -tau. Starting from
# tau = 0 lets each region of the domain settle on either sign; starting
# from tau = 1 (the constant-medium solution) selects the physical branch.
TAU_OUTPUT_BIAS = 1.0


@dataclass(frozen=True)
class PinnConfig:
    """Network and training settings.

    Defaults are desk scale. Full scale: ``d_z=96, n_collocation=9830,
    batch_points=163, n_velocities=100, epochs=10000``.
    """

    d_z: int = 16
    hidden_layers: int = 12
    hidden_width: int = 128
    activation: str = "elu"
    lr0: float = 5e-4
    patience: int = 200
    n_collocation: int = 2048
    batch_points: int = 256
    n_velocities: int = 20
    epochs: int = 2000
    x_s: float = fmm.DEFAULT_SOURCE[0]
    z_s: float = fmm.DEFAULT_SOURCE[1]
    source_weight: float = 1.0
    exclude_cells: float = 1.0
    relative_residual: bool = True
    latent_jitter: float = 0.0
    mixed_batches: bool = False
    seed: int = 0

    def __post_init__(self):
        ints = ("hidden_layers", "hidden_width", "patience", "n_collocation", "batch_points",
                "n_velocities")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"PinnConfig.{name} must be positive")
        if self.d_z < 0 or self.epochs < 0:
            raise ValidationError("d_z and epochs must be non-negative")
        if self.batch_points > self.n_collocation:
            raise ValidationError("batch_points must not exceed n_collocation")
        if self.lr0 <= 0 or self.source_weight < 0 or self.exclude_cells < 0 or self.latent_jitter < 0:
            raise ValidationError("lr0 > 0 and non-negative source_weight, exclude_cells, latent_jitter required")

    @property
    def src(self) -> fmm.SourceSpec:
        return fmm.SourceSpec(self.x_s, self.z_s)

    @property
    def in_dim(self) -> int:
        return N_SOURCE_INPUTS + self.d_z

    def mlp_spec(self) -> MlpSpec:
        return MlpSpec(self.in_dim, 1, self.hidden_layers, self.hidden_width, self.activation)

    @property
    def iterations_per_epoch(self) -> int:
        return math.ceil(self.n_collocation / self.batch_points)

    def replace(self, **kw) -> "PinnConfig":
        d = asdict(self)
        d.update(kw)
        return PinnConfig(**d)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PinnConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------- batches

@dataclass
class CollocationBatch:
    """Nodes of one velocity field used in a residual evaluation.

    ``extent`` is the ``(x_min, x_max, z_min, z_max)`` box used to
    normalize coordinates; ``z_latent`` is empty for the vanilla network.
    """

    coords: np.ndarray
    src: fmm.SourceSpec
    z_latent: np.ndarray
    v_hat: np.ndarray
    t0: np.ndarray
    grad_t0: np.ndarray
    v_src: float
    extent: tuple[float, float, float, float]

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.z_latent = np.asarray(self.z_latent, dtype=np.float64).reshape(-1)
        self.v_hat = np.asarray(self.v_hat, dtype=np.float64).reshape(-1)
        self.t0 = np.asarray(self.t0, dtype=np.float64).reshape(-1)
        self.grad_t0 = np.asarray(self.grad_t0, dtype=np.float64).reshape(-1, 2)
        n = self.coords.shape[0]
        if not (self.v_hat.shape[0] == self.t0.shape[0] == self.grad_t0.shape[0] == n):
            raise ValidationError("collocation batch arrays disagree in length")
        if np.any(self.v_hat <= 0) or not self.v_src > 0:
            raise ValidationError("velocities in a collocation batch must be positive")

    def __len__(self) -> int:
        return self.coords.shape[0]


def normalize_coords(x, z, extent):
    x0, x1, z0, z1 = extent
    return 2.0 * (x - x0) / (x1 - x0) - 1.0, 2.0 * (z - z0) / (z1 - z0) - 1.0


def input_scales(extent) -> tuple[float, float]:
    """``d(normalized)/d(physical)`` per axis, for the chain rule on gradients."""
    x0, x1, z0, z1 = extent
    return 2.0 / (x1 - x0), 2.0 / (z1 - z0)


def assemble_inputs(batch: CollocationBatch, dtype=torch.float32) -> torch.Tensor:
    """Rows ``[x, z, x_s, z_s, latent...]`` with coordinates normalized to [-1, 1]."""
    xn, zn = normalize_coords(batch.coords[:, 0], batch.coords[:, 1], batch.extent)
    xs, zs = normalize_coords(batch.src.x_s, batch.src.z_s, batch.extent)
    n = len(batch)
    rows = np.empty((n, N_SOURCE_INPUTS + batch.z_latent.size))
    rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3] = xn, zn, xs, zs
    rows[:, 4:] = batch.z_latent
    return torch.as_tensor(rows, dtype=dtype)


def source_inputs(batch: CollocationBatch, dtype=torch.float32) -> torch.Tensor:
    """The single input row located at the source itself."""
    xs, zs = normalize_coords(batch.src.x_s, batch.src.z_s, batch.extent)
    row = np.concatenate([[xs, zs, xs, zs], batch.z_latent])
    return torch.as_tensor(row[None], dtype=dtype)


def factored_residual(tau, grad_tau, t0, grad_t0, v_hat, v_src):
    """Eikonal residual ``|grad(T0 tau)|^2 - 1/v^2`` in expanded form.

    ``grad_tau`` and ``grad_t0`` are ``batch x 2`` physical gradients;
    ``|grad T0|^2`` is replaced by its analytic value ``1/v_src^2``.
    Works on numpy arrays and torch tensors alike.
    """
    gt2 = grad_tau[:, 0] ** 2 + grad_tau[:, 1] ** 2
    cross = grad_t0[:, 0] * grad_tau[:, 0] + grad_t0[:, 1] * grad_tau[:, 1]
    return t0 ** 2 * gt2 + 2.0 * t0 * tau * cross + tau ** 2 / v_src ** 2 - 1.0 / v_hat ** 2


@dataclass
class _TensorBatch:
    """Pre-converted tensors for the training hot loop."""

    inputs: torch.Tensor
    t0: torch.Tensor
    grad_t0: torch.Tensor
    v_hat: torch.Tensor
    v_src: float
    src_row: torch.Tensor
    scales: tuple[float, float]

    @classmethod
    def from_batch(cls, batch: CollocationBatch, dtype=torch.float32) -> "_TensorBatch":
        as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
        return cls(assemble_inputs(batch, dtype), as_t(batch.t0), as_t(batch.grad_t0), as_t(batch.v_hat),
                   float(batch.v_src), source_inputs(batch, dtype), input_scales(batch.extent))

    def take(self, idx: torch.Tensor) -> "_TensorBatch":
        return _TensorBatch(self.inputs[idx], self.t0[idx], self.grad_t0[idx], self.v_hat[idx],
                            self.v_src, self.src_row, self.scales)

    @classmethod
    def stack(cls, batches: list["_TensorBatch"]) -> "_TensorBatch":
        """Velocity-major stack; index with :meth:`gather`."""
        return cls(torch.stack([b.inputs for b in batches]), torch.stack([b.t0 for b in batches]),
                   torch.stack([b.grad_t0 for b in batches]), torch.stack([b.v_hat for b in batches]),
                   torch.tensor([b.v_src for b in batches], dtype=batches[0].t0.dtype),
                   torch.cat([b.src_row for b in batches]), batches[0].scales)

    def gather(self, vel: torch.Tensor, idx: torch.Tensor) -> "_TensorBatch":
        """Point ``k`` taken from velocity ``vel[k]`` at node ``idx[k]`` (stacked batches only)."""
        return _TensorBatch(self.inputs[vel, idx], self.t0[vel, idx], self.grad_t0[vel, idx],
                            self.v_hat[vel, idx], self.v_src[vel], self.src_row[torch.unique(vel)],
                            self.scales)

    def shift_latent(self, dz: torch.Tensor) -> "_TensorBatch":
        """Copy with ``dz`` added to the latent input columns."""
        pad = torch.cat([torch.zeros(N_SOURCE_INPUTS, dtype=dz.dtype), dz])
        return _TensorBatch(self.inputs + pad, self.t0, self.grad_t0, self.v_hat, self.v_src,
                            self.src_row + pad, self.scales)


def _loss_terms(params, spec: MlpSpec, tb: _TensorBatch, source_weight: float, relative: bool = False):
    x = tb.inputs.detach().requires_grad_(True)
    tau = diffnet.mlp_forward(params, spec, x)[:, 0]
    (g,) = torch.autograd.grad(tau.sum(), x, create_graph=True)
    grad_tau = torch.stack((g[:, 0] * tb.scales[0], g[:, 1] * tb.scales[1]), dim=1)
    r = factored_residual(tau, grad_tau, tb.t0, tb.grad_t0, tb.v_hat, tb.v_src)
    if relative:
        r = r * tb.v_hat ** 2
    pde = torch.mean(r ** 2)
    if source_weight:
        tau_s = diffnet.mlp_forward(params, spec, tb.src_row)[:, 0]
        return pde + source_weight * torch.mean((tau_s - 1.0) ** 2), pde
    return pde, pde


def pinn_loss(params, spec: MlpSpec, batch: CollocationBatch | _TensorBatch,
              source_weight: float = 1.0, relative: bool = False) -> torch.Tensor:
    """``mean(r^2) + source_weight * (tau(x_s) - 1)^2`` with exact input gradients.

    With ``relative=True`` each residual is scaled by ``v_hat^2`` so that
    fast and slow regions carry equal weight.
    """
    dtype = next(iter(params.values())).dtype
    tb = batch if isinstance(batch, _TensorBatch) else _TensorBatch.from_batch(batch, dtype)
    loss, _ = _loss_terms(params, spec, tb, source_weight, relative)
    if not torch.isfinite(loss.detach()):
        fp = hashlib.sha256(tb.inputs.detach().numpy().tobytes()).hexdigest()[:12]
        raise TrainingError(f"non-finite PINN loss on batch {fp}")
    return loss


# -------------------------------------------------------- velocity setup

def exclusion_radius(grid: ScalarField2D, cfg: PinnConfig) -> float:
    return cfg.exclude_cells * max(grid.dx, grid.dz)


def collocation_nodes(grid: ScalarField2D, cfg: PinnConfig, n: int | None = None, seed: int | None = None):
    """Seeded subset of flat node indices outside the source exclusion radius."""
    n = cfg.n_collocation if n is None else n
    far = np.flatnonzero(fmm.source_distance(grid, cfg.src).ravel() > exclusion_radius(grid, cfg))
    if n > far.size:
        raise ValidationError(f"n_collocation={n} exceeds the {far.size} eligible grid nodes")
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 0x5EED])
    return np.sort(rng.choice(far, size=n, replace=False))


def make_batch(v_hat: ScalarField2D, nodes: np.ndarray, src: fmm.SourceSpec,
               z_latent=()) -> CollocationBatch:
    """Collocation batch on the given flat node indices of ``v_hat``."""
    bg = fmm.background_t0(v_hat, src)
    X, Z = v_hat.mesh()
    coords = np.stack([X.ravel()[nodes], Z.ravel()[nodes]], axis=1)
    grad = np.stack([bg.grad_t0_x.values.ravel()[nodes], bg.grad_t0_z.values.ravel()[nodes]], axis=1)
    return CollocationBatch(coords, src, np.asarray(z_latent, dtype=np.float64),
                            v_hat.values.ravel()[nodes], bg.t0.values.ravel()[nodes], grad,
                            bg.v_src, v_hat.extent)


# ------------------------------------------------------------- the model

@dataclass
class PinnModel:
    params: NetworkParams
    cfg: PinnConfig
    ae_hash: str = ""
    train_ids: list = field(default_factory=list)
    train_latents: np.ndarray | None = None

    @property
    def spec(self) -> MlpSpec:
        return self.cfg.mlp_spec()

    def tau(self, inputs: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return diffnet.mlp_forward(self.params, self.spec, inputs)[:, 0]


def _pinn_bundle(model: PinnModel, adam=None, sched=None, epoch=None, kind="latent_pinn") -> TensorBundle:
    entries = diffnet.params_to_entries(model.params)
    if model.train_latents is not None:
        entries["train/latents"] = np.asarray(model.train_latents, dtype=np.float64)
    meta = {"kind": kind, "config": model.cfg.to_json(), "ae_hash": model.ae_hash,
            "d_z": model.cfg.d_z, "train_ids": [int(i) for i in model.train_ids]}
    if adam is not None:
        a_entries, a_meta = diffnet.adam_to_bundle_parts(adam)
        entries.update(a_entries)
        meta.update(a_meta)
    if sched is not None:
        meta.update(diffnet.scheduler_to_metadata(sched))
    if epoch is not None:
        meta["epochs_done"] = int(epoch)
    return TensorBundle(entries, meta)


def load_pinn(path) -> PinnModel:
    b = load_bundle(path)
    if b.metadata.get("kind") not in ("latent_pinn", "vanilla_pinn"):
        raise ValidationError(f"{path} is not a PINN checkpoint")
    cfg = PinnConfig.from_json(b.metadata["config"])
    params = diffnet.params_from_entries(b.entries)
    diffnet.check_params(params, cfg.mlp_spec().param_shapes())
    lat = b.entries.get("train/latents")
    return PinnModel(params, cfg, b.metadata.get("ae_hash", ""), list(b.metadata.get("train_ids", [])),
                     None if lat is None else np.asarray(lat))


@dataclass
class PinnTrainResult:
    model: PinnModel
    checkpoint: Path | None
    history: list[dict]


def _training_setup(manifest: DatasetManifest, ae: AeModel, cfg: PinnConfig):
    ids = manifest.indices("train")[: cfg.n_velocities]
    if len(ids) < cfg.n_velocities:
        raise ValidationError(f"train split has {len(ids)} fields, n_velocities={cfg.n_velocities}")
    flds = [manifest.load(i) for i in ids]
    codes = ae.encode(flds).z.double().numpy()
    v_hats = ae.decode(codes)
    nodes = collocation_nodes(v_hats[0], cfg)
    batches = [_TensorBatch.from_batch(make_batch(vh, nodes, cfg.src, z)) for vh, z in zip(v_hats, codes)]
    return ids, codes, batches


def train_latent_pinn(manifest: DatasetManifest, ae: AeModel | str | Path, cfg: PinnConfig,
                      out_dir=None, resume: bool = False, stop_after: int | None = None,
                      checkpoint_every: int = 50) -> PinnTrainResult:
    """Train the latent-conditioned PINN on ``cfg.n_velocities`` training fields.

    Each epoch shuffles the collocation subset into ``iterations_per_epoch``
    chunks; every chunk is paired with one uniformly drawn velocity and
    drives one Adam step. The plateau scheduler sees the epoch-mean loss.
    """
    ae = ae if isinstance(ae, AeModel) else load_autoencoder(ae)
    if ae.cfg.d_z != cfg.d_z:
        raise ValidationError(f"PINN d_z={cfg.d_z} does not match autoencoder d_z={ae.cfg.d_z}")
    ids, codes, batches = _training_setup(manifest, ae, cfg)
    spec = cfg.mlp_spec()
    out = Path(out_dir) if out_dir is not None else None
    ckpt_path = out / "pinn.lpnb" if out is not None else None
    metrics_path = out / "pinn_metrics.csv" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if resume:
        if ckpt_path is None or not ckpt_path.exists():
            raise ValidationError("resume requested but no checkpoint exists")
        b = load_bundle(ckpt_path)
        if b.metadata.get("ae_hash") != ae.fingerprint():
            raise ValidationError("resume checkpoint was trained against a different autoencoder")
        params = diffnet.params_from_entries(b.entries)
        adam = diffnet.adam_from_bundle_parts(b.entries, b.metadata)
        sched = diffnet.scheduler_from_metadata(b.metadata)
        start = int(b.metadata["epochs_done"])
        history = _read_metrics(metrics_path)[:start]
    else:
        params = diffnet.init_mlp(spec, cfg.seed, output_bias=TAU_OUTPUT_BIAS)
        adam = diffnet.adam_init(params, cfg.lr0)
        sched = diffnet.PlateauScheduler(lr=cfg.lr0, patience=cfg.patience)
        start, history = 0, []
    for p in params.values():
        p.requires_grad_(True)
    model = PinnModel(params, cfg, ae.fingerprint(), list(ids), codes)
    history = _fit(model, adam, sched, batches, start, cfg.epochs if stop_after is None else min(cfg.epochs, stop_after),
                   history, ckpt_path, metrics_path, checkpoint_every, "latent_pinn")
    for p in params.values():
        p.requires_grad_(False)
    return PinnTrainResult(model, ckpt_path, history)


def _fit(model: PinnModel, adam, sched, batches: list[_TensorBatch], start: int, end: int,
         history: list[dict], ckpt_path, metrics_path, checkpoint_every: int, kind: str,
         eval_batch: _TensorBatch | None = None) -> list[dict]:
    cfg, spec, params = model.cfg, model.spec, model.params
    n_coll = batches[0].inputs.shape[0]
    mixed = _TensorBatch.stack(batches) if cfg.mixed_batches and len(batches) > 1 else None
    names = list(params)
    t_start = time.perf_counter()
    for epoch in range(start, end):
        gen = epoch_generator(cfg.seed, epoch, stream=1)
        perm = torch.randperm(n_coll, generator=gen)
        which = torch.randint(len(batches), (cfg.iterations_per_epoch,), generator=gen)
        if mixed is not None:
            vel = torch.randint(len(batches), (n_coll,), generator=gen)
        adam.lr = sched.lr
        total = 0.0
        for it in range(cfg.iterations_per_epoch):
            idx = perm[it * cfg.batch_points:(it + 1) * cfg.batch_points]
            if mixed is not None:
                tb = mixed.gather(vel[idx], idx)
            else:
                tb = batches[int(which[it])].take(idx)
            if cfg.latent_jitter and cfg.d_z:
                tb = tb.shift_latent(cfg.latent_jitter * torch.randn(cfg.d_z, generator=gen))
            loss, _ = _loss_terms(params, spec, tb, cfg.source_weight, cfg.relative_residual)
            if not torch.isfinite(loss.detach()):
                raise TrainingError(f"non-finite PINN loss at epoch {epoch} iteration {it}")
            grads = torch.autograd.grad(loss, [params[k] for k in names])
            diffnet.adam_step(adam, params, dict(zip(names, grads)))
            total += loss.item()
        row = {"epoch": epoch, "loss": total / cfg.iterations_per_epoch, "lr": adam.lr,
               "wall_time_s": time.perf_counter() - t_start}
        if eval_batch is not None:
            row["eval_loss"] = evaluate_loss(params, spec, eval_batch, cfg.source_weight,
                                             cfg.relative_residual)
        sched.step(row["loss"])
        history.append(row)
        last = epoch + 1 == end
        if ckpt_path is not None and (last or (epoch + 1) % checkpoint_every == 0):
            _atomic_save(_pinn_bundle(model, adam, sched, epoch + 1, kind), ckpt_path)
            _write_metrics(metrics_path, history)
        if epoch % 100 == 0 or last:
            log.info("%s epoch %d loss %.3e lr %.1e", kind, epoch, row["loss"], row["lr"])
    return history


def evaluate_loss(params, spec: MlpSpec, tb: _TensorBatch, source_weight: float,
                  relative: bool = False, chunk: int = 4096) -> float:
    """Full-batch :func:`pinn_loss` value (PDE mean over all nodes plus source term)."""
    n = tb.inputs.shape[0]
    pde_sum = 0.0
    src_term = 0.0
    for c in range(0, n, chunk):
        sub = tb.take(torch.arange(c, min(c + chunk, n)))
        _, pde = _loss_terms(params, spec, sub, 0.0, relative)
        pde_sum += pde.item() * sub.inputs.shape[0]
    if source_weight:
        with torch.no_grad():
            tau_s = diffnet.mlp_forward(params, spec, tb.src_row)[0, 0].item()
        src_term = source_weight * (tau_s - 1.0) ** 2
    return pde_sum / n + src_term


# --------------------------------------------------------------- inference

def _grid_batch(grid: ScalarField2D, src: fmm.SourceSpec, z_latent, v_hat: ScalarField2D | None = None):
    nodes = np.arange(grid.nz * grid.nx)
    vh = v_hat if v_hat is not None else grid.with_values(np.ones(grid.shape))
    return make_batch(vh, nodes, src, z_latent)


def predict_traveltime(model: PinnModel, v_hat: ScalarField2D, z_latent=()) -> ScalarField2D:
    """``T0 * tau`` on every node of ``v_hat`` (``T0`` uses ``v_hat`` at the source)."""
    batch = _grid_batch(v_hat, model.cfg.src, z_latent, v_hat)
    x = assemble_inputs(batch)
    tau = model.tau(x).double().numpy()
    return v_hat.with_values((batch.t0 * tau).reshape(v_hat.shape))


def infer_traveltime(pinn: PinnModel | str | Path, ae: AeModel | str | Path, v: ScalarField2D,
                     src: fmm.SourceSpec | None = None) -> ScalarField2D:
    """Zero-shot traveltime for a velocity field: encode, decode, one forward pass.

    Raises if any optimizer step happens during the call.
    """
    pinn = pinn if isinstance(pinn, PinnModel) else load_pinn(pinn)
    ae = ae if isinstance(ae, AeModel) else load_autoencoder(ae)
    if ae.cfg.d_z != pinn.cfg.d_z:
        raise ValidationError(f"autoencoder d_z={ae.cfg.d_z} incompatible with PINN d_z={pinn.cfg.d_z}")
    if pinn.ae_hash and pinn.ae_hash != ae.fingerprint():
        raise ValidationError("PINN checkpoint was trained against a different autoencoder")
    if v.shape != ae.grid.shape:
        raise ValidationError(f"velocity grid {v.shape} incompatible with autoencoder grid {ae.grid.shape}")
    if src is not None and src.as_tuple() != pinn.cfg.src.as_tuple():
        raise ValidationError("source position differs from the one the PINN was trained for")
    steps = diffnet.optimizer_step_count()
    z = ae.encode(v).z[0].double().numpy()
    t = predict_traveltime(pinn, ae.decode(z), z)
    if diffnet.optimizer_step_count() != steps:
        raise TrainingError("optimizer steps were taken during zero-shot inference")
    return t


@dataclass(frozen=True)
class VelocityReconstruction:
    velocity: ScalarField2D
    valid: np.ndarray


def reconstruct_velocity(t: ScalarField2D, src: fmm.SourceSpec | None = None,
                         exclude_radius: float | None = None) -> VelocityReconstruction:
    """``1 / |grad T|`` by central differences (one-sided at the edges).

    Nodes within ``exclude_radius`` of the source, and nodes where
    ``|grad T| < 1e-9``, are marked invalid in ``valid`` and hold 0.
    """
    gz, gx = np.gradient(t.values, t.dz, t.dx)
    mag = np.hypot(gx, gz)
    valid = mag >= 1e-9
    if src is not None:
        r = fmm.default_exclude_radius(t) if exclude_radius is None else exclude_radius
        valid &= fmm.source_distance(t, src) > r
    v = np.where(valid, 1.0 / np.where(valid, mag, 1.0), 0.0)
    return VelocityReconstruction(t.with_values(v), valid)


def median_velocity_error(t: ScalarField2D, v_ref: ScalarField2D, src: fmm.SourceSpec,
                          exclude_radius: float | None = None) -> float:
    rec = reconstruct_velocity(t, src, exclude_radius)
    m = rec.valid
    return float(np.median(np.abs(rec.velocity.values[m] - v_ref.values[m]) / v_ref.values[m]))


# ------------------------------------------------------------- baselines

@dataclass
class VanillaResult:
    params: NetworkParams
    curve: list[float]
    history: list[dict]
    cfg: PinnConfig


def train_vanilla_pinn(v: ScalarField2D, cfg: PinnConfig, init: NetworkParams | str | Path | None = None,
                       epochs: int | None = None, out_dir=None) -> VanillaResult:
    """Single-velocity PINN without latent inputs (input dim 4).

    ``init=None`` starts from the seeded initialization; otherwise the
    parameters (or a vanilla checkpoint path) of a previously trained
    network are copied (transfer learning). ``curve[k]`` is the full
    collocation-set loss after ``k`` epochs (``curve[0]`` before training).
    """
    vcfg = cfg.replace(d_z=0, n_velocities=1)
    spec = vcfg.mlp_spec()
    if init is None:
        params = diffnet.init_mlp(spec, vcfg.seed, output_bias=TAU_OUTPUT_BIAS)
    else:
        src_params = load_pinn(init).params if isinstance(init, (str, Path)) else init
        diffnet.check_params(src_params, spec.param_shapes())
        params = {k: t.detach().clone() for k, t in src_params.items()}
    nodes = collocation_nodes(v, vcfg)
    tb = _TensorBatch.from_batch(make_batch(v, nodes, vcfg.src))
    adam = diffnet.adam_init(params, vcfg.lr0)
    sched = diffnet.PlateauScheduler(lr=vcfg.lr0, patience=vcfg.patience)
    for p in params.values():
        p.requires_grad_(True)
    model = PinnModel(params, vcfg)
    n_epochs = vcfg.epochs if epochs is None else epochs
    out = Path(out_dir) if out_dir is not None else None
    ckpt = metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ckpt, metrics = out / "vanilla.lpnb", out / "vanilla_metrics.csv"
    first = evaluate_loss(params, spec, tb, vcfg.source_weight, vcfg.relative_residual)
    history = _fit(model, adam, sched, [tb], 0, n_epochs, [], ckpt, metrics, max(n_epochs, 1),
                   "vanilla_pinn", eval_batch=tb)
    for p in params.values():
        p.requires_grad_(False)
    return VanillaResult(params, [first] + [h["eval_loss"] for h in history], history, vcfg)


def latent_loss_on(model: PinnModel, ae: AeModel, v: ScalarField2D) -> float:
    """Full collocation-set loss of the trained latent PINN on a new field (no training)."""
    steps = diffnet.optimizer_step_count()
    z = ae.encode(v).z[0].double().numpy()
    v_hat = ae.decode(z)
    tb = _TensorBatch.from_batch(make_batch(v_hat, collocation_nodes(v_hat, model.cfg), model.cfg.src, z))
    loss = evaluate_loss(model.params, model.spec, tb, model.cfg.source_weight,
                         model.cfg.relative_residual)
    if diffnet.optimizer_step_count() != steps:
        raise TrainingError("optimizer steps were taken while evaluating the latent PINN")
    return loss


def epochs_to_reach(curve: Sequence[float], target: float) -> int | None:
    """First epoch index whose loss is <= target (None if never)."""
    for k, val in enumerate(curve):
        if val <= target:
            return k
    return None


def rank_by_latent_distance(z_ref, codes) -> list[int]:
    """Indices of ``codes`` by ascending Euclidean distance to ``z_ref`` (ties by index)."""
    z_ref = np.asarray(z_ref, dtype=np.float64).reshape(-1)
    arr = np.asarray(codes, dtype=np.float64).reshape(len(codes), -1) if len(codes) else np.zeros((0, z_ref.size))
    if arr.shape[1] != z_ref.size:
        raise ValidationError(f"code dimension {arr.shape[1]} != reference dimension {z_ref.size}")
    d = np.linalg.norm(arr - z_ref, axis=1)
    return [int(i) for i in np.lexsort((np.arange(len(d)), d))]


# -------------------------------------------------------------- evaluation

@dataclass
class EvalRow:
    sample_id: int
    split: str
    latent_distance_rank: int
    rel_l1: float
    rel_l2: float
    max_rel: float
    vrec_median_rel_err: float


def evaluate(pinn: PinnModel, ae: AeModel, manifest: DatasetManifest, split: str = "test",
             limit: int | None = None, out_csv=None, backend: str | None = None) -> list[EvalRow]:
    """Compare zero-shot traveltimes against fast marching on the true fields.

    ``latent_distance_rank`` orders the evaluated samples by the distance of
    their code to the nearest training code (0 = closest).
    ``vrec_median_rel_err`` compares ``1/|grad T|`` with the decoder velocity.
    """
    ids = manifest.indices(split)[:limit]
    src = pinn.cfg.src
    rows, dists = [], []
    for i in ids:
        v = manifest.load(i)
        z = ae.encode(v).z[0].double().numpy()
        v_hat = ae.decode(z)
        t_hat = infer_traveltime(pinn, ae, v)
        t_ref = fmm.solve_eikonal(v, src, backend=backend)
        err = fmm.traveltime_error(t_hat, t_ref, src)
        vrec = median_velocity_error(t_hat, v_hat, src)
        if pinn.train_latents is not None and len(pinn.train_latents):
            dists.append(float(np.min(np.linalg.norm(pinn.train_latents - z, axis=1))))
        else:
            dists.append(0.0)
        rows.append(EvalRow(int(i), split, 0, err.rel_l1, err.rel_l2, err.max_rel, vrec))
    for rank, k in enumerate(np.lexsort((np.arange(len(dists)), dists))):
        rows[k].latent_distance_rank = rank
    if out_csv is not None:
        write_eval_csv(out_csv, rows)
    return rows


def write_eval_csv(path, rows: list[EvalRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})


def read_eval_csv(path) -> list[EvalRow]:
    with open(path, newline="") as fh:
        return [EvalRow(int(r["sample_id"]), r["split"], int(r["latent_distance_rank"]),
                        float(r["rel_l1"]), float(r["rel_l2"]), float(r["max_rel"]),
                        float(r["vrec_median_rel_err"])) for r in csv.DictReader(fh)]


def _write_metrics(path: Path, rows: list[dict]) -> None:
    cols = list(METRICS_COLUMNS) + (["eval_loss"] if rows and "eval_loss" in rows[0] else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in cols})


def _read_metrics(path: Path) -> list[dict]:
    if path is None or not path.exists():
        return []
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(v) for k, v in r.items() if k != "epoch"}}
                for r in csv.DictReader(fh)]
