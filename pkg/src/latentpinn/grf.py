"""Gaussian-random-field velocity datasets.

Images are synthesized by shaping complex white noise with an isotropic
power-law spectrum and inverting the FFT, then stretched onto a
5 km x 1 km grid and mapped to velocities.
"""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import GenerationError, ValidationError
from .tensorio import EXTENSION, ScalarField2D, load_bundle, load_field, save_field

log = logging.getLogger(__name__)

DOMAIN_X_KM = 5.0
DOMAIN_Z_KM = 1.0
DEFAULT_VELOCITY_RANGE = (2.0, 6.0)
SPLITS = ("train", "valid", "test")
DATA_ENV = "LATENTPINN_DATA"


@dataclass(frozen=True)
class GrfParams:
    n: int = 128
    tau: float = 7.0
    alpha: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 4 or self.n % 2:
            raise ValidationError(f"GRF size n must be even and >= 4, got {self.n}")
        if not self.tau > 0:
            raise ValidationError(f"tau must be positive, got {self.tau}")
        if not self.alpha > 1:
            raise ValidationError(f"alpha must exceed 1, got {self.alpha}")


def wavenumbers(n: int) -> np.ndarray:
    """Integer wavenumbers 0..n/2-1, -n/2..-1 in FFT order."""
    return np.fft.fftfreq(n, d=1.0 / n)


def spectral_amplitude(params: GrfParams) -> np.ndarray:
    """Noise multiplier on the ``n x n`` Fourier grid, DC mode zeroed."""
    n, tau, alpha = params.n, params.tau, params.alpha
    k = wavenumbers(n)
    kz, kx = np.meshgrid(k, k, indexing="ij")
    eta = n**2 * math.sqrt(2.0) * tau ** (0.5 * (2 * alpha - 2))
    amp = eta * ((4 * math.pi**2 * (kx**2 + kz**2) + tau**2) / 2.0) ** (-alpha / 2.0)
    amp[0, 0] = 0.0
    return amp


def white_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))


def hermitian_part(spectrum: np.ndarray) -> np.ndarray:
    """``(S[k] + conj(S[-k])) / 2``; its inverse FFT is the real part of ``ifft2(S)``."""
    mirrored = np.roll(np.flip(spectrum, axis=(0, 1)), 1, axis=(0, 1))
    return 0.5 * (spectrum + np.conj(mirrored))


def _image_grid(n: int) -> tuple[float, float]:
    return DOMAIN_X_KM / (n - 1), DOMAIN_Z_KM / (n - 1)


def sample_grf(params: GrfParams, noise: np.ndarray | None = None) -> ScalarField2D:
    """Draw one GRF image rescaled to exactly [-1, 1].

    Parameters
    ----------
    params : GrfParams
    noise : complex array of shape (n, n), optional
        White noise ``C``; drawn from ``params.seed`` when omitted.

    Raises
    ------
    GenerationError
        If the field is constant (e.g. all-zero noise).
    """
    n = params.n
    if noise is None:
        noise = white_noise(n, np.random.default_rng(params.seed))
    noise = np.asarray(noise, dtype=np.complex128)
    if noise.shape != (n, n):
        raise ValidationError(f"noise shape {noise.shape} does not match Fourier grid ({n}, {n})")
    spectrum = hermitian_part(noise * spectral_amplitude(params))
    raw = np.fft.ifft2(spectrum)
    img = raw.real
    if np.abs(raw.imag).max() > 1e-9 * max(np.linalg.norm(img), 1e-300):
        raise GenerationError("inverse FFT left a non-negligible imaginary residue")
    lo, hi = img.min(), img.max()
    if not hi - lo > 1e-12 * max(1.0, np.abs(img).max()):
        raise GenerationError("degenerate GRF sample: field is constant")
    img = 2.0 * (img - lo) / (hi - lo) - 1.0
    dx, dz = _image_grid(n)
    return ScalarField2D(np.clip(img, -1.0, 1.0), dx, dz)


def image_to_velocity(values: np.ndarray, velocity_range=DEFAULT_VELOCITY_RANGE) -> np.ndarray:
    """Affine map [-1, 1] -> [v_min, v_max]; for (2, 6) this is ``2 * (x + 2)``."""
    vmin, vmax = velocity_range
    return vmin + (np.asarray(values) + 1.0) * (vmax - vmin) / 2.0


def velocity_to_image(values: np.ndarray, velocity_range=DEFAULT_VELOCITY_RANGE) -> np.ndarray:
    vmin, vmax = velocity_range
    return 2.0 * (np.asarray(values) - vmin) / (vmax - vmin) - 1.0


def to_velocity(image: ScalarField2D, velocity_range=DEFAULT_VELOCITY_RANGE) -> ScalarField2D:
    """Map a [-1, 1] image to km/s on the 5 km x 1 km domain."""
    vals = image.values
    if vals.min() < -1 - 1e-6 or vals.max() > 1 + 1e-6:
        raise ValidationError(
            f"image values must lie in [-1, 1], found [{vals.min():.6g}, {vals.max():.6g}]"
        )
    vel = image_to_velocity(np.clip(vals, -1.0, 1.0), velocity_range)
    return ScalarField2D(vel, DOMAIN_X_KM / (image.nx - 1), DOMAIN_Z_KM / (image.nz - 1))


def sample_velocity(params: GrfParams, index: int, velocity_range=DEFAULT_VELOCITY_RANGE,
                    max_attempts: int = 8) -> ScalarField2D:
    """Velocity sample ``index`` using the substream ``(seed, index, attempt)``."""
    for attempt in range(max_attempts):
        rng = np.random.default_rng([params.seed, index, attempt])
        try:
            img = sample_grf(params, white_noise(params.n, rng))
        except GenerationError:
            continue
        return to_velocity(img, velocity_range)
    raise GenerationError(f"sample {index}: {max_attempts} degenerate draws in a row")


def split_sizes(count: int, fracs: Sequence[float]) -> tuple[int, int, int]:
    if len(fracs) != 3 or any(f <= 0 for f in fracs) or sum(fracs) > 1 + 1e-12:
        raise ValidationError(f"split fractions must be 3 positive numbers summing to <= 1, got {fracs}")
    sizes = [int(round(count * f)) for f in fracs]
    while sum(sizes) > count:
        sizes[int(np.argmax(sizes))] -= 1
    return tuple(sizes)


@dataclass
class DatasetManifest:
    root: str
    sample_paths: list[str]
    split: dict[str, list[int]]
    velocity_range: tuple[float, float]
    generator: dict | str = "external"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.velocity_range = tuple(float(v) for v in self.velocity_range)
        if not self.velocity_range[0] < self.velocity_range[1]:
            raise ValidationError(f"velocity range must satisfy v_min < v_max, got {self.velocity_range}")
        seen: set[int] = set()
        for name, idx in self.split.items():
            for i in idx:
                if not 0 <= i < len(self.sample_paths):
                    raise ValidationError(f"split {name!r} index {i} out of range")
                if i in seen:
                    raise ValidationError(f"sample {i} appears in more than one split")
                seen.add(i)

    def path(self, index: int) -> Path:
        p = Path(self.sample_paths[index])
        return p if p.is_absolute() else Path(self.root) / p

    def load(self, index: int) -> ScalarField2D:
        return load_field(self.path(index))

    def indices(self, split: str) -> list[int]:
        if split == "all":
            return list(range(len(self.sample_paths)))
        return list(self.split.get(split, []))

    def fields(self, split: str) -> Iterator[tuple[int, ScalarField2D]]:
        for i in self.indices(split):
            yield i, self.load(i)

    def validate(self) -> None:
        missing = [str(self.path(i)) for i in range(len(self.sample_paths)) if not self.path(i).exists()]
        if missing:
            raise ValidationError(f"manifest references missing files: {missing[:5]}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["velocity_range"] = list(self.velocity_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        return cls(**d)

    def write(self, path=None) -> Path:
        path = Path(path) if path else Path(self.root) / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json" if root.is_dir() else root
    m = DatasetManifest.from_json(json.loads(path.read_text()))
    if not Path(m.root).is_absolute():
        m.root = str((path.parent / m.root).resolve())
    return m


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))


def build_dataset(count: int, params: GrfParams, split_fracs=(0.8, 0.1, 0.1), out_dir=None,
                  velocity_range=DEFAULT_VELOCITY_RANGE, workers: int = 1) -> DatasetManifest:
    """Generate ``count`` GRF velocity fields under ``out_dir/samples``.

    Sample ``i`` depends only on ``(params.seed, i)``, so files are
    byte-identical across runs. Splits are contiguous index ranges in
    train/valid/test order.
    """
    out = Path(out_dir) if out_dir is not None else default_data_root()
    sizes = split_sizes(count, split_fracs)
    samples = out / "samples"
    created = not samples.exists()
    samples.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(count - 1)))
    names = [f"samples/{i:0{width}d}{EXTENSION}" for i in range(count)]

    def write_one(i: int) -> None:
        fld = sample_velocity(params, i, velocity_range)
        save_field(fld, out / names[i], kind="velocity", index=i)

    try:
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                list(pool.map(write_one, range(count)))
        else:
            for i in range(count):
                write_one(i)
        bounds = np.cumsum((0,) + sizes)
        split = {s: list(range(int(bounds[k]), int(bounds[k + 1]))) for k, s in enumerate(SPLITS)}
        manifest = DatasetManifest(
            root=str(out.resolve()),
            sample_paths=names,
            split=split,
            velocity_range=velocity_range,
            generator={"kind": "grf", **asdict(params)},
        )
        manifest.write()
    except OSError:
        if created:
            shutil.rmtree(samples, ignore_errors=True)
        raise
    log.info("wrote %d GRF samples to %s (splits %s)", count, out, sizes)
    return manifest


def ingest_folder(directory, velocity_range=DEFAULT_VELOCITY_RANGE, raw_images: bool | None = None,
                  split_fracs=(0.8, 0.1, 0.1), out_dir=None) -> DatasetManifest:
    """Build a manifest over externally supplied ``.lpnb`` fields.

    Files holding raw images in [-1, 1] (``raw_images=True``, or metadata
    ``kind == "image"`` when ``raw_images`` is None) are rescaled into
    ``velocity_range`` and written to ``out_dir`` (default
    ``directory/velocity``).
    """
    directory = Path(directory)
    files = sorted(p for p in directory.rglob(f"*{EXTENSION}") if p.is_file())
    if not files:
        raise ValidationError(f"no {EXTENSION} field files found in {directory}")
    bundles = [load_bundle(p) for p in files]
    shapes = {}
    for p, b in zip(files, bundles):
        name = "v" if "v" in b else next(iter(b.entries), None)
        shapes[p] = tuple(b[name].shape) if name else ()
    reference = next(iter(shapes.values()))
    offenders = [str(p) for p, s in shapes.items() if s != reference or len(s) != 2]
    if offenders:
        raise ValidationError(f"heterogeneous or non-2D field shapes (expected {reference}): {offenders}")

    out = Path(out_dir) if out_dir is not None else directory / "velocity"
    paths: list[str] = []
    for k, (p, b) in enumerate(zip(files, bundles)):
        is_raw = raw_images if raw_images is not None else b.metadata.get("kind") == "image"
        if not is_raw:
            paths.append(str(p.resolve()))
            continue
        name = "v" if "v" in b else next(iter(b.entries))
        img = np.asarray(b[name], dtype=np.float64)
        if img.min() < -1 - 1e-6 or img.max() > 1 + 1e-6:
            raise ValidationError(f"{p}: raw image values outside [-1, 1]")
        nz, nx = img.shape
        fld = ScalarField2D(image_to_velocity(np.clip(img, -1, 1), velocity_range),
                            DOMAIN_X_KM / (nx - 1), DOMAIN_Z_KM / (nz - 1))
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"{k:06d}{EXTENSION}"
        save_field(fld, target, kind="velocity", source=str(p))
        paths.append(str(target.resolve()))

    sizes = split_sizes(len(paths), split_fracs) if len(paths) >= 3 else (len(paths), 0, 0)
    bounds = np.cumsum((0,) + tuple(sizes))
    split = {s: list(range(int(bounds[k]), int(bounds[k + 1]))) for k, s in enumerate(SPLITS)}
    manifest = DatasetManifest(
        root=str(directory.resolve()),
        sample_paths=paths,
        split=split,
        velocity_range=velocity_range,
        generator="external",
    )
    manifest.validate()
    return manifest
