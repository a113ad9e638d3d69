"""Parameter-efficient subspaces: BitFit, DiffFit, LoRA, and CoLoRA.

Attaching a subspace registers adapters on the model (LoRA on every linear
layer, CoLoRA on every decoder conv) or simply selects existing parameters
(BitFit, DiffFit, full). Each attach returns a :class:`SubspaceDescriptor`
mapping the trainable slots to contiguous segments of a single flat vector;
:func:`flatten` / :func:`unflatten` are exact inverses on those slots.

LoRA's up-projection and CoLoRA's output-channel factor start at zero, so a
freshly attached subspace never changes the model's function (warm start).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError
from .tensor import ConvSpec, as_tensor
from .tucker import IDENTITY_MODE, TuckerFactors, tucker_reconstruct

__all__ = [
    "METHODS",
    "CoLoRAAdapter",
    "LoRAAdapter",
    "Slot",
    "SubspaceDescriptor",
    "attach_bitfit",
    "attach_colora",
    "attach_difffit",
    "attach_lora",
    "build_subspace",
    "colora_delta_forward",
    "flatten",
    "full_subspace",
    "materialize_delta",
    "unflatten",
]

METHODS = ("bitfit", "difffit", "lora", "colora", "full")


@dataclass
class LoRAAdapter:
    """Additive low-rank perturbation x @ down @ up on a linear layer."""

    layer: str
    rank: int
    down: np.ndarray  # (din, rank)
    up: np.ndarray  # (rank, dout)


@dataclass
class CoLoRAAdapter:
    """Tucker-2 factored kernel perturbation on a conv layer.

    The implied kernel is core contracted with channel_out on mode 0 and
    channel_in on mode 1; it is never materialized during forward passes.
    """

    layer: str
    rank: int
    core: np.ndarray  # (rank, rank, k1, k2)
    channel_out: np.ndarray  # (cout, rank)
    channel_in: np.ndarray  # (cin, rank)
    spec: ConvSpec


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class SubspaceDescriptor:
    """Ordered trainable slots with their offsets into a flat vector."""

    method: str
    slots: tuple[Slot, ...]
    dim: int


def _descriptor(method: str, named_shapes) -> SubspaceDescriptor:
    slots = []
    offset = 0
    for name, shape in named_shapes:
        slot = Slot(name=name, shape=tuple(int(s) for s in shape), offset=offset)
        slots.append(slot)
        offset += slot.size
    return SubspaceDescriptor(method=method, slots=tuple(slots), dim=offset)


def conv_delta(x, core, channel_out, channel_in, spec: ConvSpec):
    """CoLoRA perturbation branch as three chained convolutions.

    1x1 conv with the transposed input factor (cin -> rank), padded strided
    conv with the core (rank -> rank), then 1x1 conv with the output factor
    (rank -> cout). Works on plain arrays and autodiff nodes alike.
    """
    rank = ad.value_of(core).shape[0]
    cin = ad.value_of(channel_in).shape[0]
    cout = ad.value_of(channel_out).shape[0]
    kernel_in = ad.reshape(ad.moveaxis(channel_in, 0, 1), (rank, cin, 1, 1))
    squeezed = ad.conv2d(x, kernel_in)
    mixed = ad.conv2d(squeezed, core, spec)
    kernel_out = ad.reshape(channel_out, (cout, rank, 1, 1))
    return ad.conv2d(mixed, kernel_out)


def colora_delta_forward(x, adapter: CoLoRAAdapter) -> np.ndarray:
    """Evaluate the adapter's perturbation on ``x`` without materializing it."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] != adapter.channel_in.shape[0]:
        raise ShapeError(
            f"input shape {x.shape} does not match adapter with {adapter.channel_in.shape[0]} input channels"
        )
    return conv_delta(x, adapter.core, adapter.channel_out, adapter.channel_in, adapter.spec)


def materialize_delta(adapter: CoLoRAAdapter) -> np.ndarray:
    """The implied kernel perturbation, for oracles and inspection only."""
    factors = TuckerFactors(
        core=adapter.core,
        factors=(adapter.channel_out, adapter.channel_in, IDENTITY_MODE, IDENTITY_MODE),
    )
    return tucker_reconstruct(factors)


def _effective_rank(rank: int, limit: int, cap_rank: bool, layer: str, kind: str) -> int:
    if rank < 1:
        raise DomainError(f"rank must be >= 1, got {rank}")
    if rank <= limit:
        return rank
    if cap_rank:
        return limit
    raise DomainError(
        f"rank {rank} exceeds min({kind}) = {limit} of layer '{layer}'; "
        f"pass cap_rank=True to clamp per layer"
    )


def attach_lora(model, rank: int, seed: int, cap_rank: bool = False) -> SubspaceDescriptor:
    """Attach LoRA adapters to every linear layer; returns the descriptor.

    Down projections are Glorot-Gaussian, up projections zero, so the
    adapted forward equals the base forward at initialization.
    """
    rng = np.random.default_rng(seed)
    named_shapes = []
    model.lora.clear()
    for layer, din, dout in model.linear_layers():
        r = _effective_rank(rank, min(din, dout), cap_rank, layer, "din, dout")
        down = rng.normal(0.0, np.sqrt(2.0 / (din + r)), size=(din, r))
        up = np.zeros((r, dout))
        model.lora[layer] = LoRAAdapter(layer=layer, rank=r, down=down, up=up)
        named_shapes.append((f"lora.{layer}.down", (din, r)))
        named_shapes.append((f"lora.{layer}.up", (r, dout)))
    return _descriptor("lora", named_shapes)


def attach_colora(model, rank: int, seed: int, cap_rank: bool = False) -> SubspaceDescriptor:
    """Attach CoLoRA adapters to every decoder conv layer.

    The output-channel factor starts at zero; core and input-channel factor
    are Glorot-Gaussian for their own shapes.
    """
    rng = np.random.default_rng(seed)
    named_shapes = []
    model.colora.clear()
    for layer, cin, cout, (k1, k2), spec in model.conv_layers():
        r = _effective_rank(rank, min(cin, cout), cap_rank, layer, "cin, cout")
        core = rng.normal(0.0, np.sqrt(1.0 / (r * k1 * k2)), size=(r, r, k1, k2))
        channel_in = rng.normal(0.0, np.sqrt(2.0 / (cin + r)), size=(cin, r))
        channel_out = np.zeros((cout, r))
        model.colora[layer] = CoLoRAAdapter(
            layer=layer, rank=r, core=core, channel_out=channel_out, channel_in=channel_in, spec=spec
        )
        named_shapes.append((f"colora.{layer}.core", (r, r, k1, k2)))
        named_shapes.append((f"colora.{layer}.channel_out", (cout, r)))
        named_shapes.append((f"colora.{layer}.channel_in", (cin, r)))
    return _descriptor("colora", named_shapes)


def attach_bitfit(model) -> SubspaceDescriptor:
    """Select every bias vector (linear, conv, and layer-norm shifts)."""
    named_shapes = [
        (name, value.shape)
        for name, value in model.params.items()
        if name.endswith(".bias") or name.endswith(".shift")
    ]
    return _descriptor("bitfit", named_shapes)


def attach_difffit(model) -> SubspaceDescriptor:
    """BitFit slots plus block scalar factors and layer-norm scales."""
    named_shapes = [
        (name, value.shape)
        for name, value in model.params.items()
        if name.endswith(".bias")
        or name.endswith(".shift")
        or name.endswith(".scale")
        or name.endswith("gamma_attn")
        or name.endswith("gamma_mlp")
    ]
    return _descriptor("difffit", named_shapes)


def full_subspace(model) -> SubspaceDescriptor:
    """Every base parameter of the model."""
    return _descriptor("full", [(name, value.shape) for name, value in model.params.items()])


def build_subspace(model, method: str, rank=None, seed: int = 0, cap_rank: bool = False) -> SubspaceDescriptor:
    """Dispatch on the method tag; rank applies to lora/colora only."""
    if method not in METHODS:
        raise DomainError(f"unknown method '{method}', expected one of {METHODS}")
    if method in ("lora", "colora"):
        if rank is None:
            raise DomainError(f"method '{method}' requires a rank")
        if method == "lora":
            return attach_lora(model, rank, seed, cap_rank=cap_rank)
        return attach_colora(model, rank, seed, cap_rank=cap_rank)
    if rank is not None:
        raise DomainError(f"method '{method}' does not take a rank")
    if method == "bitfit":
        return attach_bitfit(model)
    if method == "difffit":
        return attach_difffit(model)
    return full_subspace(model)


def flatten(model, desc: SubspaceDescriptor) -> np.ndarray:
    """Concatenate the descriptor's slots into one vector."""
    return np.concatenate(
        [np.asarray(model.get_value(slot.name), dtype=np.float64).reshape(-1) for slot in desc.slots]
    ) if desc.slots else np.zeros(0)


def unflatten(model, desc: SubspaceDescriptor, vec) -> None:
    """Write vector segments back into the descriptor's slots; exact inverse
    of :func:`flatten`. Only slots in the descriptor are touched."""
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.shape != (desc.dim,):
        raise ShapeError(f"vector has length {vec.shape[0]}, descriptor dim is {desc.dim}")
    for slot in desc.slots:
        segment = vec[slot.offset : slot.offset + slot.size]
        model.set_value(slot.name, segment.reshape(slot.shape))
