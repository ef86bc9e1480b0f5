"""KL-regularized convolutional autoencoder for velocity fields.

The encoder maps a normalized ``1 x H x W`` image through stride-2 conv
blocks to a ``4 x 4`` feature map, then to Gaussian parameters
``(mu, logvar)``; the deterministic code is ``z = tanh(mu)``. The decoder
mirrors the encoder with transposed-conv blocks and ends in a Tanh image
that is mapped affinely onto the dataset velocity range.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import diffnet
from .diffnet import ConvBlockSpec, NetworkParams
from .errors import TrainingError, ValidationError
from .grf import DatasetManifest, image_to_velocity, velocity_to_image
from .tensorio import ScalarField2D, TensorBundle, load_bundle, save_bundle

log = logging.getLogger(__name__)

LOGVAR_CLAMP = (-20.0, 10.0)
METRICS_COLUMNS = ("epoch", "recon_loss", "kl_loss", "lr", "wall_time_s")
BOTTLENECK = 4  # spatial size of the innermost feature map


@dataclass(frozen=True)
class AeConfig:
    """Autoencoder architecture and training settings (desk-scale defaults).

    Full scale is ``image_size=128, enc_blocks=5, d_z=96``.
    """

    d_z: int = 16
    enc_blocks: int = 4
    base_channels: int = 16
    max_channels: int = 64
    image_size: int = 64
    kl_weight: float = 1e-6
    lr0: float = 1e-3
    patience: int = 20
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.d_z < 1:
            raise ValidationError("d_z must be >= 1")
        if self.kl_weight < 0:
            raise ValidationError("kl_weight must be >= 0")
        if self.enc_blocks < 1 or self.base_channels < 1 or self.max_channels < 1:
            raise ValidationError("enc_blocks and channel counts must be >= 1")
        if self.image_size != BOTTLENECK * 2 ** self.enc_blocks:
            raise ValidationError(
                f"image_size {self.image_size} must equal {BOTTLENECK} * 2**enc_blocks "
                f"= {BOTTLENECK * 2 ** self.enc_blocks}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1 or self.lr0 <= 0:
            raise ValidationError("epochs >= 0, batch_size >= 1, patience >= 1, lr0 > 0 required")

    @property
    def channels(self) -> list[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(self.enc_blocks)]

    @property
    def flat_dim(self) -> int:
        return self.channels[-1] * BOTTLENECK * BOTTLENECK

    def encoder_blocks(self) -> list[ConvBlockSpec]:
        ins = [1] + self.channels[:-1]
        return [ConvBlockSpec("encoder", a, b) for a, b in zip(ins, self.channels)]

    def decoder_blocks(self) -> list[ConvBlockSpec]:
        rev = self.channels[::-1]
        outs = rev[1:] + [rev[-1]]
        return [ConvBlockSpec("decoder", a, b) for a, b in zip(rev, outs)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AeConfig":
        d = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class LatentCode:
    z: torch.Tensor
    mu: torch.Tensor
    logvar: torch.Tensor


# ------------------------------------------------------------- parameters

def _sub(params, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def param_shapes(cfg: AeConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, blk in enumerate(cfg.encoder_blocks()):
        shapes.update({f"enc{i}/{k}": s for k, s in blk.param_shapes().items()})
    shapes["enc/mu/weight"] = (cfg.d_z, cfg.flat_dim)
    shapes["enc/mu/bias"] = (cfg.d_z,)
    shapes["enc/logvar/weight"] = (cfg.d_z, cfg.flat_dim)
    shapes["enc/logvar/bias"] = (cfg.d_z,)
    shapes["dec/fc/weight"] = (cfg.flat_dim, cfg.d_z)
    shapes["dec/fc/bias"] = (cfg.flat_dim,)
    for i, blk in enumerate(cfg.decoder_blocks()):
        shapes.update({f"dec{i}/{k}": s for k, s in blk.param_shapes().items()})
    shapes["dec/out/weight"] = (1, cfg.channels[0], 3, 3)
    shapes["dec/out/bias"] = (1,)
    return shapes


def init_params(cfg: AeConfig, dtype=torch.float32) -> NetworkParams:
    gen = torch.Generator().manual_seed(int(cfg.seed))
    params: NetworkParams = {}
    for i, blk in enumerate(cfg.encoder_blocks()):
        params.update({f"enc{i}/{k}": v for k, v in diffnet.init_conv_block(blk, gen, dtype).items()})
    for head in ("mu", "logvar"):
        params[f"enc/{head}/weight"] = diffnet.glorot_uniform(
            (cfg.d_z, cfg.flat_dim), cfg.flat_dim, cfg.d_z, gen, dtype)
        params[f"enc/{head}/bias"] = torch.zeros(cfg.d_z, dtype=dtype)
    params["dec/fc/weight"] = diffnet.glorot_uniform((cfg.flat_dim, cfg.d_z), cfg.d_z, cfg.flat_dim, gen, dtype)
    params["dec/fc/bias"] = torch.zeros(cfg.flat_dim, dtype=dtype)
    for i, blk in enumerate(cfg.decoder_blocks()):
        params.update({f"dec{i}/{k}": v for k, v in diffnet.init_conv_block(blk, gen, dtype).items()})
    c0 = cfg.channels[0]
    params["dec/out/weight"] = diffnet.glorot_uniform((1, c0, 3, 3), c0 * 9, 9, gen, dtype)
    params["dec/out/bias"] = torch.zeros(1, dtype=dtype)
    return params


# ------------------------------------------------------------ forward ops

def _as_images(v, cfg: AeConfig, velocity_range) -> torch.Tensor:
    """Accept a field, a list of fields or a normalized array/tensor; return ``B x 1 x H x W``."""
    if isinstance(v, ScalarField2D):
        v = [v]
    if isinstance(v, (list, tuple)) and v and isinstance(v[0], ScalarField2D):
        arr = np.stack([velocity_to_image(f.values, velocity_range) for f in v])
        x = torch.as_tensor(arr, dtype=torch.float32)
    else:
        x = torch.as_tensor(v)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ValidationError(
            f"expected images of shape B x 1 x {cfg.image_size} x {cfg.image_size}, got {tuple(x.shape)}")
    return x


def encode_images(params, cfg: AeConfig, x: torch.Tensor) -> LatentCode:
    """Encode a normalized ``B x 1 x H x W`` tensor."""
    h = x
    for i, blk in enumerate(cfg.encoder_blocks()):
        h = F.gelu(diffnet.conv_block_forward(_sub(params, f"enc{i}/"), blk, h))
    h = h.flatten(1)
    mu = F.linear(h, params["enc/mu/weight"], params["enc/mu/bias"])
    logvar = F.linear(h, params["enc/logvar/weight"], params["enc/logvar/bias"]).clamp(*LOGVAR_CLAMP)
    return LatentCode(z=torch.tanh(mu), mu=mu, logvar=logvar)


def encode(params, cfg: AeConfig, v, velocity_range=(2.0, 6.0)) -> LatentCode:
    """Latent code of velocity field(s) or of already-normalized images."""
    return encode_images(params, cfg, _as_images(v, cfg, velocity_range))


def reparameterize(code: LatentCode, seed: int | torch.Generator) -> torch.Tensor:
    """``z = tanh(mu + exp(logvar / 2) * eps)`` with seeded standard-normal ``eps``."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    eps = torch.randn(code.mu.shape, generator=gen, dtype=code.mu.dtype)
    logvar = code.logvar.clamp(*LOGVAR_CLAMP)
    return torch.tanh(code.mu + torch.exp(0.5 * logvar) * eps)


def decode_images(params, cfg: AeConfig, z: torch.Tensor) -> torch.Tensor:
    """Decode ``B x d_z`` codes to normalized ``B x 1 x H x W`` images in [-1, 1]."""
    if z.ndim == 1:
        z = z[None]
    if z.shape[-1] != cfg.d_z:
        raise ValidationError(f"latent dimension {z.shape[-1]} != d_z {cfg.d_z}")
    h = F.gelu(F.linear(z, params["dec/fc/weight"], params["dec/fc/bias"]))
    h = h.view(z.shape[0], cfg.channels[-1], BOTTLENECK, BOTTLENECK)
    for i, blk in enumerate(cfg.decoder_blocks()):
        h = F.gelu(diffnet.conv_block_forward(_sub(params, f"dec{i}/"), blk, h))
    h = F.conv2d(h, params["dec/out/weight"], params["dec/out/bias"], padding=1)
    return torch.tanh(h)


def decode(params, cfg: AeConfig, z, grid: ScalarField2D, velocity_range=(2.0, 6.0)):
    """Decode codes to velocity fields on ``grid``; one field per row of ``z``.

    Returns a single :class:`ScalarField2D` for a 1-D ``z``, else a list.
    """
    z_t = torch.as_tensor(z, dtype=torch.float32)
    with torch.no_grad():
        img = decode_images(params, cfg, z_t)[:, 0].double().numpy()
    vmin, vmax = velocity_range
    outs = [grid.with_values(np.clip(image_to_velocity(im, velocity_range), vmin, vmax)) for im in img]
    return outs[0] if z_t.ndim == 1 else outs


def ae_loss(v: torch.Tensor, v_hat: torch.Tensor, mu: torch.Tensor, logvar: torch.Tensor,
            kl_weight: float):
    """Return ``(total, recon, kl)``.

    ``recon`` is the pixel MSE; ``kl`` is the batch mean of
    ``-0.5 * sum_d (1 + logvar - mu^2 - exp(logvar))``.
    """
    if v.shape != v_hat.shape or mu.shape != logvar.shape:
        raise ValidationError("ae_loss shape mismatch")
    recon = torch.mean((v - v_hat) ** 2)
    kl = torch.mean(-0.5 * torch.sum(1.0 + logvar - mu ** 2 - torch.exp(logvar), dim=-1))
    return recon + kl_weight * kl, recon, kl


# ------------------------------------------------------------- the model

@dataclass
class AeModel:
    """Frozen autoencoder plus what is needed to map codes to fields."""

    params: NetworkParams
    cfg: AeConfig
    velocity_range: tuple[float, float]
    grid: ScalarField2D
    dataset_hash: str = ""

    def encode(self, v) -> LatentCode:
        with torch.no_grad():
            return encode(self.params, self.cfg, v, self.velocity_range)

    def decode(self, z):
        return decode(self.params, self.cfg, z, self.grid, self.velocity_range)

    def reconstruct(self, v: ScalarField2D) -> ScalarField2D:
        return self.decode(self.encode(v).z[0])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].detach().numpy().tobytes())
        return h.hexdigest()[:16]


def dataset_hash(fields_: list[ScalarField2D]) -> str:
    h = hashlib.sha256()
    for f in fields_:
        h.update(np.ascontiguousarray(f.values).tobytes())
    return h.hexdigest()[:16]


def _grid_template(fld: ScalarField2D) -> ScalarField2D:
    return fld.with_values(np.zeros(fld.shape))


def checkpoint_bundle(model: AeModel, adam=None, sched=None, epoch: int | None = None) -> TensorBundle:
    entries = diffnet.params_to_entries(model.params)
    g = model.grid
    meta = {
        "kind": "autoencoder",
        "d_z": model.cfg.d_z,
        "enc_blocks": model.cfg.enc_blocks,
        "kl_weight": model.cfg.kl_weight,
        "velocity_range": list(model.velocity_range),
        "dataset_hash": model.dataset_hash,
        "config": model.cfg.to_json(),
        "grid": [g.nz, g.nx, g.dx, g.dz, g.origin_x, g.origin_z],
    }
    if adam is not None:
        a_entries, a_meta = diffnet.adam_to_bundle_parts(adam)
        entries.update(a_entries)
        meta.update(a_meta)
    if sched is not None:
        meta.update(diffnet.scheduler_to_metadata(sched))
    if epoch is not None:
        meta["epochs_done"] = int(epoch)
    return TensorBundle(entries, meta)


def _grid_from_meta(meta) -> ScalarField2D:
    nz, nx, dx, dz, ox, oz = meta["grid"]
    return ScalarField2D(np.zeros((int(nz), int(nx))), float(dx), float(dz), float(ox), float(oz))


def load_autoencoder(path) -> AeModel:
    b = load_bundle(path)
    if b.metadata.get("kind") != "autoencoder":
        raise ValidationError(f"{path} is not an autoencoder checkpoint")
    cfg = AeConfig.from_json(b.metadata["config"])
    params = diffnet.params_from_entries(b.entries)
    diffnet.check_params(params, param_shapes(cfg))
    return AeModel(params, cfg, tuple(b.metadata["velocity_range"]), _grid_from_meta(b.metadata),
                   b.metadata.get("dataset_hash", ""))


def _atomic_save(bundle: TensorBundle, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    save_bundle(bundle, tmp)
    os.replace(tmp, path)


def epoch_generator(seed: int, epoch: int, stream: int = 0) -> torch.Generator:
    """Independent generator for one epoch, so a resumed run replays the same draws."""
    ss = np.random.SeedSequence([int(seed), int(epoch), int(stream)])
    return torch.Generator().manual_seed(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))


@dataclass
class AeTrainResult:
    model: AeModel
    checkpoint: Path
    history: list[dict]


def _load_train_images(manifest: DatasetManifest, cfg: AeConfig):
    idx = manifest.indices("train")
    if not idx:
        raise ValidationError("manifest has an empty train split")
    flds = [manifest.load(i) for i in idx]
    arr = np.stack([velocity_to_image(f.values, manifest.velocity_range) for f in flds])
    x = torch.as_tensor(arr, dtype=torch.float32)[:, None]
    if x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
        raise ValidationError(f"dataset fields are {tuple(x.shape[2:])}, config expects {cfg.image_size}^2")
    return flds, x


def train_autoencoder(manifest: DatasetManifest, cfg: AeConfig, out_dir, resume: bool = False,
                      stop_after: int | None = None) -> AeTrainResult:
    """Train on the manifest's train split.

    Writes ``ae.lpnb`` (rewritten atomically after every epoch, so a crash
    or a non-finite loss leaves the last good epoch on disk) and
    ``ae_metrics.csv``. With ``resume=True`` training continues from the
    existing checkpoint; ``stop_after`` ends the run after that many total
    epochs (used to emulate interruption).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "ae.lpnb"
    metrics_path = out / "ae_metrics.csv"
    flds, x = _load_train_images(manifest, cfg)
    dhash = dataset_hash(flds)

    if resume and ckpt_path.exists():
        b = load_bundle(ckpt_path)
        if b.metadata.get("dataset_hash") != dhash:
            raise ValidationError("resume checkpoint was trained on a different dataset")
        params = diffnet.params_from_entries(b.entries)
        adam = diffnet.adam_from_bundle_parts(b.entries, b.metadata)
        sched = diffnet.scheduler_from_metadata(b.metadata)
        start = int(b.metadata["epochs_done"])
        history = _read_metrics(metrics_path)[:start]
    else:
        params = init_params(cfg)
        adam = diffnet.adam_init(params, cfg.lr0)
        sched = diffnet.PlateauScheduler(lr=cfg.lr0, patience=cfg.patience)
        start = 0
        history = []
    for p in params.values():
        p.requires_grad_(True)
    model = AeModel(params, cfg, manifest.velocity_range, _grid_template(flds[0]), dhash)
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    n = x.shape[0]
    t_start = time.perf_counter()
    for epoch in range(start, end):
        gen = epoch_generator(cfg.seed, epoch)
        perm = torch.randperm(n, generator=gen)
        adam.lr = sched.lr
        rec_sum = kl_sum = 0.0
        for b0 in range(0, n, cfg.batch_size):
            xb = x[perm[b0:b0 + cfg.batch_size]]
            code = encode_images(params, cfg, xb)
            z = reparameterize(code, gen)
            loss, rec, kl = ae_loss(xb, decode_images(params, cfg, z), code.mu, code.logvar, cfg.kl_weight)
            if not torch.isfinite(loss.detach()):
                raise TrainingError(f"non-finite autoencoder loss at epoch {epoch}; "
                                    f"last good checkpoint kept at {ckpt_path}")
            grads = torch.autograd.grad(loss, list(params.values()))
            diffnet.adam_step(adam, params, dict(zip(params, grads)))
            rec_sum += rec.item() * xb.shape[0]
            kl_sum += kl.item() * xb.shape[0]
        row = {"epoch": epoch, "recon_loss": rec_sum / n, "kl_loss": kl_sum / n, "lr": adam.lr,
               "wall_time_s": time.perf_counter() - t_start}
        sched.step(row["recon_loss"] + cfg.kl_weight * row["kl_loss"])
        history.append(row)
        _atomic_save(checkpoint_bundle(model, adam, sched, epoch + 1), ckpt_path)
        _write_metrics(metrics_path, history)
        log.info("ae epoch %d recon %.3e kl %.3e lr %.1e", epoch, row["recon_loss"], row["kl_loss"], row["lr"])
    if not ckpt_path.exists():  # zero-epoch run still leaves a usable checkpoint
        _atomic_save(checkpoint_bundle(model, adam, sched, start), ckpt_path)
        _write_metrics(metrics_path, history)
    for p in params.values():
        p.requires_grad_(False)
    return AeTrainResult(model, ckpt_path, history)


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k] for k in METRICS_COLUMNS})


def _read_metrics(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in METRICS_COLUMNS[1:]}}
                for r in csv.DictReader(fh)]


def relative_l2(a: ScalarField2D, b: ScalarField2D) -> float:
    return float(np.linalg.norm(a.values - b.values) / np.linalg.norm(b.values))


__all__ = [
    "AeConfig", "LatentCode", "AeModel", "AeTrainResult", "param_shapes", "init_params",
    "encode", "encode_images", "reparameterize", "decode", "decode_images", "ae_loss",
    "train_autoencoder", "load_autoencoder", "checkpoint_bundle", "dataset_hash",
    "epoch_generator", "relative_l2",
]
