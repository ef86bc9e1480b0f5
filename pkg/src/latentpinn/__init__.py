"""Latent-space physics-informed neural networks for the eikonal equation.

Modules
-------
tensorio
    ``.lpnb`` tensor bundles and the ``ScalarField2D`` grid type.
grf
    Gaussian random field velocity models and on-disk datasets.
fmm
    Fast-marching traveltime solver (compiled core with a Python fallback).
diffnet
    Network primitives, gradients, Adam and the plateau scheduler.
autoenc
    Convolutional variational autoencoder for velocity fields.
pinn
    Latent-conditioned factored-eikonal PINN and its baselines.
ldm
    Diffusion sampler over the autoencoder latent space.
cli
    Command-line driver (``latentpinn`` console script).
"""

from . import autoenc, diffnet, fmm, grf, ldm, pinn, tensorio
from .autoenc import AeConfig, load_autoencoder, train_autoencoder
from .errors import (CapabilityError, FormatError, GenerationError, LatentPinnError, LengthMismatchError,
                     RangeError, TrainingError, ValidationError)
from .fmm import SourceSpec, solve_eikonal
from .grf import GrfParams, build_dataset, load_manifest
from .ldm import LdmConfig, sample_fields, sample_latents, train_ldm
from .pinn import PinnConfig, infer_traveltime, reconstruct_velocity, train_latent_pinn, train_vanilla_pinn
from .tensorio import ScalarField2D, TensorBundle, load_bundle, save_bundle

__version__ = "0.1.0"

__all__ = [
    "autoenc", "diffnet", "fmm", "grf", "ldm", "pinn", "tensorio",
    "AeConfig", "load_autoencoder", "train_autoencoder",
    "CapabilityError", "FormatError", "GenerationError", "LatentPinnError", "LengthMismatchError",
    "RangeError", "TrainingError", "ValidationError",
    "SourceSpec", "solve_eikonal", "GrfParams", "build_dataset", "load_manifest",
    "LdmConfig", "sample_fields", "sample_latents", "train_ldm",
    "PinnConfig", "infer_traveltime", "reconstruct_velocity", "train_latent_pinn", "train_vanilla_pinn",
    "ScalarField2D", "TensorBundle", "load_bundle", "save_bundle",
]
