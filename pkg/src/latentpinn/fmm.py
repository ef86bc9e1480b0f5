"""Fast-marching eikonal solver, analytic traveltimes and the factored background.

The marching loop runs in the compiled ``_fmm_core`` extension when it is
importable and falls back to :mod:`latentpinn._fmm_py` otherwise. Set
``LATENTPINN_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import _fmm_py
from .errors import ValidationError
from .tensorio import ScalarField2D, bilinear_sample

if os.environ.get("LATENTPINN_PURE_PYTHON") == "1":
    _march_compiled = None
else:
    try:
        from ._fmm_core import march as _march_compiled
    except ImportError:  # extension not built
        _march_compiled = None

BACKENDS = ("python",) + (("cython",) if _march_compiled is not None else ())
DEFAULT_BACKEND = "cython" if _march_compiled is not None else "python"

DEFAULT_SOURCE = (2.5, 0.5)


@dataclass(frozen=True)
class SourceSpec:
    x_s: float = DEFAULT_SOURCE[0]
    z_s: float = DEFAULT_SOURCE[1]

    def check_inside(self, fld: ScalarField2D) -> None:
        if not fld.contains(self.x_s, self.z_s):
            raise ValidationError(f"source ({self.x_s}, {self.z_s}) outside field extent {fld.extent}")

    def as_tuple(self) -> tuple[float, float]:
        return self.x_s, self.z_s


@dataclass(frozen=True)
class FactoredBackground:
    t0: ScalarField2D
    grad_t0_x: ScalarField2D
    grad_t0_z: ScalarField2D
    v_src: float


def default_exclude_radius(fld: ScalarField2D) -> float:
    return 5.0 * max(fld.dx, fld.dz)


def source_distance(fld: ScalarField2D, src: SourceSpec) -> np.ndarray:
    X, Z = fld.mesh()
    return np.hypot(X - src.x_s, Z - src.z_s)


def _source_node_mask(fld: ScalarField2D, src: SourceSpec) -> np.ndarray:
    """True only at a node coinciding with the source (within 1e-9 cells)."""
    i, j = fld.nearest_node(src.x_s, src.z_s)
    x, z = fld.coordinate(i, j)
    mask = np.zeros(fld.shape, dtype=bool)
    if abs(x - src.x_s) <= 1e-9 * fld.dx and abs(z - src.z_s) <= 1e-9 * fld.dz:
        mask[i, j] = True
    return mask


SCHEMES = ("factored", "plain")

# Radius (in cells) inside which one-sided factored updates keep the
# background term of the missing axis; see ``_fmm_py._solve``.
NEAR_SOURCE_CELLS = 5.0


def solve_eikonal(v: ScalarField2D, src: SourceSpec, backend: str | None = None,
                  scheme: str = "factored", return_order: bool = False):
    """First-order fast marching for ``|grad T| = 1/v``.

    With ``scheme="factored"`` the solver marches on ``tau = T / T0`` where
    ``T0 = r / v(x_s)``, which removes the point-source singularity; the
    ``"plain"`` scheme marches on ``T`` directly. Either way the 3x3 block
    around the node nearest the source is frozen at the straight-ray time
    ``r * (1/v(x_s) + 1/v) / 2``, which equals ``r / v`` in a constant medium.

    Returns
    -------
    ScalarField2D
        Traveltime in seconds; with ``return_order=True`` also the flat node
        indices in finalization order (initial block excluded).
    """
    if np.any(v.values <= 0):
        raise ValidationError("velocity must be strictly positive")
    src.check_inside(v)
    backend = backend or DEFAULT_BACKEND
    if backend == "cython":
        if _march_compiled is None:
            raise ValidationError("compiled FMM backend is not available")
        march = _march_compiled
    elif backend == "python":
        march = _fmm_py.march
    else:
        raise ValidationError(f"unknown FMM backend {backend!r}")
    if scheme not in SCHEMES:
        raise ValidationError(f"unknown FMM scheme {scheme!r}")

    bg = background_t0(v, src)
    if scheme == "factored":
        t0 = np.ascontiguousarray(bg.t0.values)
        p0x = np.ascontiguousarray(bg.grad_t0_x.values)
        p0z = np.ascontiguousarray(bg.grad_t0_z.values)
    else:
        t0 = np.ones(v.shape)
        p0x = np.zeros(v.shape)
        p0z = np.zeros(v.shape)

    i0, j0 = v.nearest_node(src.x_s, src.z_s)
    tau = np.full(v.shape, np.inf)
    known = np.zeros(v.shape, dtype=np.uint8)
    block = (slice(max(i0 - 1, 0), i0 + 2), slice(max(j0 - 1, 0), j0 + 2))
    # Straight-ray start: trapezoidal slowness along the segment from the source.
    ray = 0.5 * (1.0 / bg.v_src + 1.0 / v.values[block])
    if scheme == "factored":
        tau[block] = bg.v_src * ray
    else:
        tau[block] = source_distance(v, src)[block] * ray
    known[block] = 1
    near = (source_distance(v, src) <= NEAR_SOURCE_CELLS * max(v.dx, v.dz)).astype(np.uint8)
    slowness = np.ascontiguousarray(1.0 / v.values, dtype=np.float64)
    order = march(slowness, v.dx, v.dz, tau, known, t0, p0x, p0z, near)
    out = v.with_values(t0 * tau)
    return (out, order) if return_order else out


def analytic_constant(v0: float, src: SourceSpec, like: ScalarField2D) -> ScalarField2D:
    """``T = |x - x_s| / v0`` on the grid of ``like``."""
    if not v0 > 0:
        raise ValidationError(f"v0 must be positive, got {v0}")
    return like.with_values(source_distance(like, src) / v0)


def background_t0(v: ScalarField2D, src: SourceSpec) -> FactoredBackground:
    """Constant-medium background ``T0 = r / v(x_s)`` and its analytic gradient."""
    src.check_inside(v)
    v_src = bilinear_sample(v, src.x_s, src.z_s)
    X, Z = v.mesh()
    ddx, ddz = X - src.x_s, Z - src.z_s
    r = np.hypot(ddx, ddz)
    at_src = _source_node_mask(v, src) | (r == 0)
    safe_r = np.where(at_src, 1.0, r)
    gx = np.where(at_src, 0.0, ddx / (safe_r * v_src))
    gz = np.where(at_src, 0.0, ddz / (safe_r * v_src))
    t0 = np.where(at_src, 0.0, r / v_src)
    return FactoredBackground(v.with_values(t0), v.with_values(gx), v.with_values(gz), v_src)


@dataclass(frozen=True)
class TraveltimeError:
    rel_l1: float
    rel_l2: float
    max_rel: float


def traveltime_error(t_hat: ScalarField2D, t_ref: ScalarField2D, src: SourceSpec,
                     exclude_radius: float | None = None) -> TraveltimeError:
    """Relative errors over nodes farther than ``exclude_radius`` from the source."""
    if not t_hat.same_grid(t_ref):
        raise ValidationError("traveltime fields live on different grids")
    if exclude_radius is None:
        exclude_radius = default_exclude_radius(t_ref)
    keep = source_distance(t_ref, src) > exclude_radius
    if not keep.any():
        raise ValidationError("exclusion radius removes every node")
    diff = (t_hat.values - t_ref.values)[keep]
    ref = t_ref.values[keep]
    return TraveltimeError(
        rel_l1=float(np.abs(diff).sum() / np.abs(ref).sum()),
        rel_l2=float(np.linalg.norm(diff) / np.linalg.norm(ref)),
        max_rel=float(np.max(np.abs(diff) / np.abs(ref))),
    )
