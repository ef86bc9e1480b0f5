"""Unconditional DDPM over autoencoder latent codes.

Codes are standardized per dimension before diffusion (the statistics are
stored with the checkpoint) and the noise predictor is an MLP over
``[z_t, sinusoidal(t)]``. Sampling is ancestral with the fixed ``beta_t``
variance and ends with a clamp into the open Tanh range.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import diffnet
from .autoenc import AeModel, _atomic_save, epoch_generator, load_autoencoder
from .diffnet import MlpSpec, NetworkParams
from .errors import TrainingError, ValidationError
from .grf import DatasetManifest
from .tensorio import EXTENSION, ScalarField2D, TensorBundle, load_bundle, save_field

log = logging.getLogger(__name__)

DEFAULT_STEPS = 1000
DEFAULT_BETAS = (0.0015, 0.0195)
CLAMP = 1.0 - 1e-6
METRICS_COLUMNS = ("epoch", "loss", "lr", "wall_time_s")


@dataclass(frozen=True)
class DiffusionSchedule:
    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(steps: int = DEFAULT_STEPS, beta0: float = DEFAULT_BETAS[0],
                  beta1: float = DEFAULT_BETAS[1]) -> DiffusionSchedule:
    """Linear ``beta_t = beta0 + (beta1 - beta0) t / (steps - 1)``."""
    if int(steps) != steps or steps < 2:
        raise ValidationError("steps must be an integer >= 2")
    if not 0 < beta0 < beta1 < 1:
        raise ValidationError(f"need 0 < beta0 < beta1 < 1, got {beta0}, {beta1}")
    t = np.arange(steps, dtype=np.float64)
    beta = beta0 + (beta1 - beta0) * t / (steps - 1)
    beta[-1] = beta1
    alpha = 1.0 - beta
    return DiffusionSchedule(int(steps), beta, alpha, np.cumprod(alpha))


def q_sample(z0, t, eps, schedule: DiffusionSchedule):
    """Forward process ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar step or one step per row; numpy and torch inputs work.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.steps):
        raise ValidationError(f"diffusion step out of range [0, {schedule.steps})")
    ab = schedule.alpha_bar[t_arr]
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    if isinstance(z0, torch.Tensor):
        a = torch.as_tensor(a, dtype=z0.dtype)
        b = torch.as_tensor(b, dtype=z0.dtype)
    if np.ndim(t_arr) == 1:
        a, b = a[:, None], b[:, None]
    return a * z0 + b * eps


def timestep_embedding(t: torch.Tensor, dim: int, steps: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps (``dim`` even)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1).to(torch.float32)


@dataclass(frozen=True)
class LdmConfig:
    """Diffusion settings; full scale is ``lr0=2e-6, batch=5``."""

    steps: int = DEFAULT_STEPS
    beta0: float = DEFAULT_BETAS[0]
    beta1: float = DEFAULT_BETAS[1]
    lr0: float = 1e-3
    epochs: int = 400
    batch: int = 64
    hidden_layers: int = 3
    hidden_width: int = 256
    activation: str = "gelu"
    t_embed_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        make_schedule(self.steps, self.beta0, self.beta1)
        if self.lr0 <= 0 or self.epochs < 0 or self.batch < 1:
            raise ValidationError("lr0 > 0, epochs >= 0 and batch >= 1 required")
        if self.t_embed_dim < 2 or self.t_embed_dim % 2:
            raise ValidationError("t_embed_dim must be a positive even integer")

    def net(self, d_z: int) -> MlpSpec:
        return MlpSpec(d_z + self.t_embed_dim, d_z, self.hidden_layers, self.hidden_width, self.activation)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LdmConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class LdmModel:
    params: NetworkParams
    cfg: LdmConfig
    d_z: int
    mean: np.ndarray
    std: np.ndarray

    @property
    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.cfg.steps, self.cfg.beta0, self.cfg.beta1)

    def predict_noise(self, z_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        x = torch.cat([z_t, timestep_embedding(t, self.cfg.t_embed_dim, self.cfg.steps)], dim=1)
        return diffnet.mlp_forward(self.params, self.cfg.net(self.d_z), x)


def _bundle(model: LdmModel, adam=None, epoch=None) -> TensorBundle:
    entries = diffnet.params_to_entries(model.params)
    entries["stats/mean"] = np.asarray(model.mean, dtype=np.float64)
    entries["stats/std"] = np.asarray(model.std, dtype=np.float64)
    meta = {"kind": "ldm", "config": model.cfg.to_json(), "d_z": model.d_z}
    if adam is not None:
        a_entries, a_meta = diffnet.adam_to_bundle_parts(adam)
        entries.update(a_entries)
        meta.update(a_meta)
    if epoch is not None:
        meta["epochs_done"] = int(epoch)
    return TensorBundle(entries, meta)


def load_ldm(path) -> LdmModel:
    b = load_bundle(path)
    if b.metadata.get("kind") != "ldm":
        raise ValidationError(f"{path} is not a diffusion checkpoint")
    cfg = LdmConfig.from_json(b.metadata["config"])
    d_z = int(b.metadata["d_z"])
    params = diffnet.params_from_entries(b.entries)
    diffnet.check_params(params, cfg.net(d_z).param_shapes())
    return LdmModel(params, cfg, d_z, np.asarray(b["stats/mean"]), np.asarray(b["stats/std"]))


@dataclass
class LdmTrainResult:
    model: LdmModel
    checkpoint: Path | None
    history: list[dict]


def train_ldm(latents, cfg: LdmConfig, out_dir=None) -> LdmTrainResult:
    """Fit the noise predictor with the standard ``E|eps - eps_hat|^2`` objective.

    ``t`` is uniform over all steps. ``history[k]["loss"]`` is the mean
    mini-batch loss of epoch ``k``.
    """
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValidationError("latents must be an N x d_z array with N >= 2")
    if not np.all(np.isfinite(z)):
        raise ValidationError("latents contain non-finite values")
    d_z = z.shape[1]
    mean = z.mean(axis=0)
    std = np.maximum(z.std(axis=0), 1e-6)
    data = torch.as_tensor((z - mean) / std, dtype=torch.float32)
    params = diffnet.init_mlp(cfg.net(d_z), cfg.seed)
    for p in params.values():
        p.requires_grad_(True)
    adam = diffnet.adam_init(params, cfg.lr0)
    model = LdmModel(params, cfg, d_z, mean, std)
    sched = model.schedule
    ab = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "ldm.lpnb" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    names = list(params)
    history: list[dict] = []
    n = data.shape[0]
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        gen = epoch_generator(cfg.seed, epoch, stream=2)
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for b0 in range(0, n, cfg.batch):
            z0 = data[perm[b0:b0 + cfg.batch]]
            t = torch.randint(cfg.steps, (z0.shape[0],), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            a = ab[t][:, None]
            z_t = a.sqrt() * z0 + (1.0 - a).sqrt() * eps
            loss = torch.mean((eps - model.predict_noise(z_t, t)) ** 2)
            if not torch.isfinite(loss.detach()):
                raise TrainingError(f"non-finite diffusion loss at epoch {epoch}; last good checkpoint kept")
            grads = torch.autograd.grad(loss, [params[k] for k in names])
            diffnet.adam_step(adam, params, dict(zip(names, grads)))
            total += loss.item()
            count += 1
        history.append({"epoch": epoch, "loss": total / count, "lr": adam.lr,
                        "wall_time_s": time.perf_counter() - t_start})
        if ckpt is not None and ((epoch + 1) % 50 == 0 or epoch + 1 == cfg.epochs):
            _atomic_save(_bundle(model, adam, epoch + 1), ckpt)
            _write_metrics(out / "ldm_metrics.csv", history)
    if ckpt is not None and cfg.epochs == 0:
        _atomic_save(_bundle(model, adam, 0), ckpt)
        _write_metrics(out / "ldm_metrics.csv", history)
    for p in params.values():
        p.requires_grad_(False)
    return LdmTrainResult(model, ckpt, history)


def sample_latents(model: LdmModel | str | Path, count: int, seed: int = 0,
                   return_trajectory: bool = False):
    """Ancestral DDPM sampling of ``count`` codes, clamped into (-1, 1).

    With ``return_trajectory=True`` also returns the list of standardized
    intermediate states ``z_T, ..., z_0``.
    """
    model = model if isinstance(model, LdmModel) else load_ldm(model)
    if count < 0:
        raise ValidationError("count must be >= 0")
    traj = []
    if count == 0:
        out = np.zeros((0, model.d_z))
        return (out, traj) if return_trajectory else out
    sched = model.schedule
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn((count, model.d_z), generator=gen)
    with torch.no_grad():
        for t in range(sched.steps - 1, -1, -1):
            if return_trajectory:
                traj.append(x.clone())
            eps_hat = model.predict_noise(x, torch.full((count,), t, dtype=torch.long))
            coef = sched.beta[t] / math.sqrt(1.0 - sched.alpha_bar[t])
            x = (x - coef * eps_hat) / math.sqrt(sched.alpha[t])
            if t > 0:
                x = x + math.sqrt(sched.beta[t]) * torch.randn(x.shape, generator=gen)
    if return_trajectory:
        traj.append(x.clone())
    z = np.clip(x.double().numpy() * model.std + model.mean, -CLAMP, CLAMP)
    return (z, traj) if return_trajectory else z


def sample_fields(ldm_model: LdmModel | str | Path, ae: AeModel | str | Path, count: int,
                  seed: int = 0) -> list[ScalarField2D]:
    """Decode freshly sampled codes into velocity fields."""
    ldm_model = ldm_model if isinstance(ldm_model, LdmModel) else load_ldm(ldm_model)
    ae = ae if isinstance(ae, AeModel) else load_autoencoder(ae)
    if ldm_model.d_z != ae.cfg.d_z:
        raise ValidationError(f"diffusion d_z={ldm_model.d_z} does not match autoencoder d_z={ae.cfg.d_z}")
    z = sample_latents(ldm_model, count, seed)
    return [] if count == 0 else list(ae.decode(z))


def write_sampled_dataset(flds: list[ScalarField2D], out_dir, velocity_range, seed: int = 0) -> DatasetManifest:
    """Store sampled fields with the GRF dataset layout (all in the test split)."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    names = []
    for i, f in enumerate(flds):
        name = f"samples/{i:06d}{EXTENSION}"
        save_field(f, out / name, kind="velocity", index=i)
        names.append(name)
    manifest = DatasetManifest(root=str(out.resolve()), sample_paths=names,
                               split={"train": [], "valid": [], "test": list(range(len(names)))},
                               velocity_range=velocity_range, generator={"kind": "ldm", "seed": int(seed)})
    manifest.write()
    return manifest


def encoder_latents(ae: AeModel, manifest: DatasetManifest, split: str = "train",
                    batch: int = 64) -> np.ndarray:
    """Deterministic ``tanh(mu)`` codes of a dataset split."""
    idx = manifest.indices(split)
    out = []
    for b0 in range(0, len(idx), batch):
        out.append(ae.encode([manifest.load(i) for i in idx[b0:b0 + batch]]).z.double().numpy())
    return np.concatenate(out) if out else np.zeros((0, ae.cfg.d_z))


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in METRICS_COLUMNS})
