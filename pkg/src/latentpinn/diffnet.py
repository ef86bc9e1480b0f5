"""Differentiable-network substrate built on torch autograd.

Networks are plain dictionaries of named tensors (``NetworkParams``) and
pure forward functions, so gradients with respect to parameters *and*
inputs come from the same reverse-mode engine. Optimizer and scheduler are
small explicit state machines so they can be checkpointed into bundles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CapabilityError, TrainingError, ValidationError

NetworkParams = Dict[str, torch.Tensor]

ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "elu": F.elu,
    "gelu": F.gelu,
    "tanh": torch.tanh,
}

_OPTIMIZER_STEPS = 0


def optimizer_step_count() -> int:
    """Number of :func:`adam_step` calls made in this process."""
    return _OPTIMIZER_STEPS


def _activation(name: str):
    try:
        return ACTIVATIONS[name.lower()]
    except KeyError:
        raise ValidationError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# --------------------------------------------------------------------- MLP

@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network: ``hidden_layers`` x (affine + activation) + affine."""

    in_dim: int
    out_dim: int
    hidden_layers: int
    hidden_width: int
    activation: str = "elu"

    def __post_init__(self):
        for name in ("in_dim", "out_dim", "hidden_width"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"MlpSpec.{name} must be >= 1")
        if self.hidden_layers < 0:
            raise ValidationError("MlpSpec.hidden_layers must be >= 0")
        _activation(self.activation)

    @property
    def n_affine(self) -> int:
        return self.hidden_layers + 1

    def layer_dims(self) -> list[tuple[int, int]]:
        """``(fan_in, fan_out)`` of every affine layer."""
        widths = [self.in_dim] + [self.hidden_width] * self.hidden_layers + [self.out_dim]
        return list(zip(widths[:-1], widths[1:]))

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (fi, fo) in enumerate(self.layer_dims()):
            shapes[f"layer{i}/weight"] = (fo, fi)
            shapes[f"layer{i}/bias"] = (fo,)
        return shapes

    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())


def glorot_uniform(shape, fan_in: int, fan_out: int, gen: torch.Generator,
                   dtype=torch.float32) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0).mul_(bound).to(dtype)


def init_mlp(spec: MlpSpec, seed: int, dtype=torch.float32, output_bias: float = 0.0) -> NetworkParams:
    """Seeded Glorot-uniform weights; zero biases except the output layer's."""
    gen = torch.Generator().manual_seed(int(seed))
    params: NetworkParams = {}
    last = spec.n_affine - 1
    for i, (fi, fo) in enumerate(spec.layer_dims()):
        params[f"layer{i}/weight"] = glorot_uniform((fo, fi), fi, fo, gen, dtype)
        params[f"layer{i}/bias"] = torch.full((fo,), output_bias if i == last else 0.0, dtype=dtype)
    return params


def check_params(params: Mapping[str, torch.Tensor], shapes: Mapping[str, tuple]) -> None:
    """Raise :class:`ValidationError` naming the first missing or misshapen tensor."""
    for name, shape in shapes.items():
        if name not in params:
            raise ValidationError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != tuple(shape):
            raise ValidationError(
                f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {tuple(shape)}")


def mlp_forward(params: Mapping[str, torch.Tensor], spec: MlpSpec, inputs: torch.Tensor) -> torch.Tensor:
    """Evaluate the MLP on a ``batch x in_dim`` tensor."""
    check_params(params, spec.param_shapes())
    if inputs.ndim != 2 or inputs.shape[1] != spec.in_dim:
        raise ValidationError(f"inputs must be batch x {spec.in_dim}, got {tuple(inputs.shape)}")
    act = _activation(spec.activation)
    h = inputs
    last = spec.n_affine - 1
    for i in range(spec.n_affine):
        h = F.linear(h, params[f"layer{i}/weight"], params[f"layer{i}/bias"])
        if i < last:
            h = act(h)
    return h


# --------------------------------------------------------------- gradients

def _leaves(params: Mapping[str, torch.Tensor]) -> NetworkParams:
    return {k: v.detach().requires_grad_(True) for k, v in params.items()}


def grad_params(loss_fn: Callable[[NetworkParams], torch.Tensor],
                params: Mapping[str, torch.Tensor]) -> NetworkParams:
    """Reverse-mode gradient of a scalar ``loss_fn(params)``.

    Parameters absent from the graph receive zero gradients. A loss that is
    not a scalar tensor, or that passes through an operation without a
    derivative, raises :class:`CapabilityError`.
    """
    leaves = _leaves(params)
    loss = loss_fn(leaves)
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise CapabilityError("loss_fn must return a scalar torch tensor built from supported primitives")
    if not loss.requires_grad:
        return {k: torch.zeros_like(v) for k, v in leaves.items()}
    try:
        grads = torch.autograd.grad(loss.reshape(()), list(leaves.values()), allow_unused=True)
    except RuntimeError as exc:
        raise CapabilityError(f"unsupported primitive in loss graph: {exc}") from exc
    return {k: (torch.zeros_like(v) if g is None else g)
            for (k, v), g in zip(leaves.items(), grads)}


def grad_inputs(params: Mapping[str, torch.Tensor], spec: MlpSpec, inputs: torch.Tensor,
                output_selector: int | Callable[[torch.Tensor], torch.Tensor] = 0,
                create_graph: bool = False) -> torch.Tensor:
    """Per-sample gradient of one network output with respect to the inputs.

    ``output_selector`` is an output column index or a callable mapping the
    ``batch x out_dim`` output to one scalar per sample. Samples are
    independent, so the gradient of the sum is the per-sample gradient.
    With ``create_graph=True`` the result stays differentiable, which is
    what a residual loss over input derivatives needs.
    """
    x = inputs if (create_graph and inputs.requires_grad) else inputs.detach().requires_grad_(True)
    out = mlp_forward(params, spec, x)
    if callable(output_selector):
        sel = output_selector(out)
    else:
        k = int(output_selector)
        if not 0 <= k < spec.out_dim:
            raise ValidationError(f"output_selector {k} out of range for out_dim {spec.out_dim}")
        sel = out[:, k]
    if sel.shape != (x.shape[0],):
        raise ValidationError("output_selector must produce one scalar per sample")
    if not sel.requires_grad:
        return torch.zeros_like(x)
    try:
        (g,) = torch.autograd.grad(sel.sum(), x, create_graph=create_graph, allow_unused=True)
    except RuntimeError as exc:
        raise CapabilityError(f"unsupported primitive in network graph: {exc}") from exc
    return torch.zeros_like(x) if g is None else g


# ------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: NetworkParams = field(default_factory=dict)
    v: NetworkParams = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("Adam betas must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValidationError("Adam lr and eps must be positive")


def adam_init(params: Mapping[str, torch.Tensor], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                     m={k: torch.zeros_like(p) for k, p in params.items()},
                     v={k: torch.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: NetworkParams, grads: Mapping[str, torch.Tensor]):
    """One bias-corrected Adam update.

    Parameters are updated in place (and returned) so autograd leaves stay
    valid across iterations. Non-finite gradients raise
    :class:`TrainingError` before anything is modified.
    """
    global _OPTIMIZER_STEPS
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape or name not in state.m:
            raise ValidationError(f"gradient/state for parameter {name!r} missing or misshapen")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    _OPTIMIZER_STEPS += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    return params, state


# -------------------------------------------------------------- scheduler

@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` stagnant epochs."""

    lr: float
    patience: int
    factor: float = 0.5
    min_lr: float = 0.0
    best_loss: float = math.inf
    stagnant_count: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if not 0 < self.factor < 1:
            raise ValidationError("factor must lie in (0, 1)")

    def step(self, epoch_loss: float) -> float:
        if not math.isfinite(epoch_loss):
            raise ValidationError("scheduler received a non-finite loss")
        if epoch_loss < self.best_loss:
            self.best_loss = float(epoch_loss)
            self.stagnant_count = 0
        else:
            self.stagnant_count += 1
            if self.stagnant_count >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stagnant_count = 0
        return self.lr


def scheduler_step(s: PlateauScheduler, epoch_loss: float) -> PlateauScheduler:
    s.step(epoch_loss)
    return s


# ------------------------------------------------------------ conv blocks

@dataclass(frozen=True)
class ConvBlockSpec:
    """Down (encoder) or up (decoder) block.

    ``encoder``: stride-2 conv, activation, stride-1 conv (halves H, W).
    ``decoder``: stride-2 transposed conv, activation, stride-1 conv
    (doubles H, W). ``activation="identity"`` exists for testing.
    """

    kind: str
    in_ch: int
    out_ch: int
    kernel: int = 3
    activation: str = "gelu"

    def __post_init__(self):
        if self.kind not in ("encoder", "decoder"):
            raise ValidationError(f"ConvBlockSpec.kind must be 'encoder' or 'decoder', got {self.kind!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError("kernel must be a positive odd integer")
        if self.activation != "identity":
            _activation(self.activation)

    @property
    def first(self) -> str:
        return "down" if self.kind == "encoder" else "up"

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        if self.kind == "encoder":
            w0 = (self.out_ch, self.in_ch, k, k)
        else:  # conv_transpose2d weight layout is (in, out, k, k)
            w0 = (self.in_ch, self.out_ch, k, k)
        return {f"{self.first}/weight": w0, f"{self.first}/bias": (self.out_ch,),
                "conv/weight": (self.out_ch, self.out_ch, k, k), "conv/bias": (self.out_ch,)}


def he_uniform(shape, fan_in: int, gen: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(shape, generator=gen, dtype=torch.float64) * 2.0 - 1.0).mul_(bound).to(dtype)


def init_conv_block(spec: ConvBlockSpec, seed: int | torch.Generator, dtype=torch.float32) -> NetworkParams:
    """He-uniform kernels and zero biases.

    Glorot scaling halves the signal variance at every GELU, which over a
    deep conv stack leaves the code nearly constant at initialization.
    """
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    k2 = spec.kernel ** 2
    out = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("bias"):
            out[name] = torch.zeros(shape, dtype=dtype)
        else:
            # transposed-conv weights are (in, out, k, k); each output sees in*k2/4 taps
            fan_in = shape[1] * k2 if name != "up/weight" else max(shape[0] * k2 // 4, 1)
            out[name] = he_uniform(shape, fan_in, gen, dtype)
    return out


def conv_block_forward(params: Mapping[str, torch.Tensor], spec: ConvBlockSpec,
                       images: torch.Tensor) -> torch.Tensor:
    """Apply one block to a ``batch x in_ch x H x W`` tensor."""
    check_params(params, spec.param_shapes())
    if images.ndim != 4 or images.shape[1] != spec.in_ch:
        raise ValidationError(f"images must be batch x {spec.in_ch} x H x W, got {tuple(images.shape)}")
    pad = spec.kernel // 2
    if spec.kind == "encoder":
        if images.shape[2] % 2 or images.shape[3] % 2:
            raise ValidationError(f"spatial dims {tuple(images.shape[2:])} not divisible by stride 2")
        h = F.conv2d(images, params["down/weight"], params["down/bias"], stride=2, padding=pad)
    else:
        h = F.conv_transpose2d(images, params["up/weight"], params["up/bias"], stride=2,
                               padding=pad, output_padding=1)
    if spec.activation != "identity":
        h = _activation(spec.activation)(h)
    return F.conv2d(h, params["conv/weight"], params["conv/bias"], stride=1, padding=pad)


def conv_block_backward(params: Mapping[str, torch.Tensor], spec: ConvBlockSpec,
                        images: torch.Tensor, grad_output: torch.Tensor):
    """Vector-Jacobian product of :func:`conv_block_forward`.

    Returns ``(param_grads, input_grad)`` for upstream gradient ``grad_output``.
    """
    leaves = _leaves(params)
    x = images.detach().requires_grad_(True)
    y = conv_block_forward(leaves, spec, x)
    if grad_output.shape != y.shape:
        raise ValidationError(f"grad_output shape {tuple(grad_output.shape)} != output {tuple(y.shape)}")
    names = list(leaves)
    grads = torch.autograd.grad(y, [leaves[n] for n in names] + [x], grad_outputs=grad_output)
    return dict(zip(names, grads[:-1])), grads[-1]


# ------------------------------------------------------------ checkpoints

def params_to_entries(params: Mapping[str, torch.Tensor], prefix: str = "param/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in params.items()}


def params_from_entries(entries: Mapping[str, np.ndarray], prefix: str = "param/",
                        dtype=torch.float32) -> NetworkParams:
    return {k[len(prefix):]: torch.tensor(np.asarray(v), dtype=dtype)
            for k, v in entries.items() if k.startswith(prefix)}


def adam_to_bundle_parts(state: AdamState, prefix: str = "adam/"):
    """``(entries, metadata)`` holding moments and scalar Adam state."""
    entries = {}
    for k in state.m:
        entries[f"{prefix}{k}/m"] = state.m[k].detach().cpu().numpy().copy()
        entries[f"{prefix}{k}/v"] = state.v[k].detach().cpu().numpy().copy()
    meta = {"adam_lr": state.lr, "adam_beta1": state.beta1, "adam_beta2": state.beta2,
            "adam_eps": state.eps, "adam_step": state.step}
    return entries, meta


def adam_from_bundle_parts(entries: Mapping[str, np.ndarray], meta: Mapping, prefix: str = "adam/",
                           dtype=torch.float32) -> AdamState:
    m, v = {}, {}
    for k, arr in entries.items():
        if not k.startswith(prefix):
            continue
        name, which = k[len(prefix):].rsplit("/", 1)
        (m if which == "m" else v)[name] = torch.tensor(np.asarray(arr), dtype=dtype)
    return AdamState(lr=float(meta["adam_lr"]), beta1=float(meta["adam_beta1"]),
                     beta2=float(meta["adam_beta2"]), eps=float(meta["adam_eps"]),
                     step=int(meta["adam_step"]), m=m, v=v)


def scheduler_to_metadata(s: PlateauScheduler) -> dict:
    return {"sched_lr": s.lr, "sched_patience": s.patience, "sched_factor": s.factor,
            "sched_min_lr": s.min_lr, "sched_best_loss": s.best_loss if math.isfinite(s.best_loss) else -1.0,
            "sched_best_finite": math.isfinite(s.best_loss), "sched_stagnant": s.stagnant_count}


def scheduler_from_metadata(meta: Mapping) -> PlateauScheduler:
    best = float(meta["sched_best_loss"]) if meta["sched_best_finite"] else math.inf
    return PlateauScheduler(lr=float(meta["sched_lr"]), patience=int(meta["sched_patience"]),
                            factor=float(meta["sched_factor"]), min_lr=float(meta["sched_min_lr"]),
                            best_loss=best, stagnant_count=int(meta["sched_stagnant"]))
