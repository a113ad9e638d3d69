"""Toy monocular-depth network: transformer encoder, convolutional decoder.

Small enough for exhaustive oracles but with every layer kind the subspace
methods target: a patch-embedding linear, single-head attention blocks with
pre-layer-norm and per-branch scalar factors, a GELU MLP, and a 3x3 conv
decoder over the nearest-neighbor-upsampled token grid. The softplus output
keeps predictions strictly positive (disparity space).

Parameters live in an insertion-ordered name -> array dict; adapters
attached by :mod:`depthbayes.peft` join the same namespace under ``lora.``
and ``colora.`` prefixes. ``forward_with`` accepts per-name overrides, which
is how the training code injects autodiff leaves.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import peft
from .data import load_tensor, save_tensor
from .errors import DomainError, ShapeError
from .tensor import ConvSpec

__all__ = ["ModelConfig", "ToyDepthNet", "build_model", "load_model", "save_model"]

LN_EPS = 1e-12
_GELU_C = 0.7978845608028654  # sqrt(2 / pi)


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 32
    image_width: int = 32
    patch_size: int = 4
    embed_dim: int = 32
    blocks: int = 2
    mlp_hidden: int = 64
    decoder_channels: tuple[int, ...] = (16, 8)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        dims = (
            self.image_height,
            self.image_width,
            self.patch_size,
            self.embed_dim,
            self.blocks,
            self.mlp_hidden,
        ) + self.decoder_channels
        if any(int(d) < 1 for d in dims):
            raise DomainError(f"all model dimensions must be >= 1: {self}")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise DomainError(
                f"image extents ({self.image_height}, {self.image_width}) must be divisible "
                f"by patch size {self.patch_size}"
            )
        if not self.decoder_channels:
            raise DomainError("at least one decoder conv channel is required")

    @property
    def tokens_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def tokens_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size


def _gelu(x):
    cubed = ad.multiply(ad.multiply(x, x), x)
    inner = ad.multiply(ad.add(x, ad.multiply(cubed, 0.044715)), _GELU_C)
    return ad.multiply(ad.multiply(x, 0.5), ad.add(ad.tanh(inner), 1.0))


def _layer_norm(tokens, scale, shift):
    centered = ad.subtract(tokens, ad.mean(tokens, axis=1, keepdims=True))
    variance = ad.mean(ad.multiply(centered, centered), axis=1, keepdims=True)
    normed = ad.divide(centered, ad.sqrt(ad.add(variance, LN_EPS)))
    return ad.add(ad.multiply(normed, scale), shift)


class ToyDepthNet:
    """Parameter container plus the forward computation."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.lora: dict[str, peft.LoRAAdapter] = {}
        self.colora: dict[str, peft.CoLoRAAdapter] = {}

    # -- layer inventory ---------------------------------------------------

    def linear_layers(self) -> list[tuple[str, int, int]]:
        cfg = self.config
        layers = [("patch_embed", cfg.patch_dim, cfg.embed_dim)]
        for b in range(cfg.blocks):
            for head in ("q", "k", "v", "out"):
                layers.append((f"blocks.{b}.attn.{head}", cfg.embed_dim, cfg.embed_dim))
            layers.append((f"blocks.{b}.mlp.fc1", cfg.embed_dim, cfg.mlp_hidden))
            layers.append((f"blocks.{b}.mlp.fc2", cfg.mlp_hidden, cfg.embed_dim))
        return layers

    def conv_layers(self) -> list[tuple[str, int, int, tuple[int, int], ConvSpec]]:
        cfg = self.config
        spec = ConvSpec(stride=(1, 1), padding=(1, 1))
        layers = []
        cin = cfg.embed_dim
        for i, cout in enumerate(cfg.decoder_channels):
            layers.append((f"decoder.conv{i}", cin, cout, (3, 3), spec))
            cin = cout
        layers.append(("decoder.out", cin, 1, (3, 3), spec))
        return layers

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- parameter namespace -----------------------------------------------

    def get_value(self, name: str) -> np.ndarray:
        if name.startswith("lora."):
            layer, fieldname = name[len("lora.") :].rsplit(".", 1)
            return getattr(self.lora[layer], fieldname)
        if name.startswith("colora."):
            layer, fieldname = name[len("colora.") :].rsplit(".", 1)
            return getattr(self.colora[layer], fieldname)
        return self.params[name]

    def set_value(self, name: str, value) -> None:
        current = self.get_value(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != current.shape:
            raise ShapeError(f"'{name}' has shape {current.shape}, got {value.shape}")
        if name.startswith("lora."):
            layer, fieldname = name[len("lora.") :].rsplit(".", 1)
            setattr(self.lora[layer], fieldname, value.copy())
        elif name.startswith("colora."):
            layer, fieldname = name[len("colora.") :].rsplit(".", 1)
            setattr(self.colora[layer], fieldname, value.copy())
        else:
            self.params[name] = value.copy()

    def copy(self) -> "ToyDepthNet":
        clone = ToyDepthNet(self.config, {k: v.copy() for k, v in self.params.items()})
        for layer, adapter in self.lora.items():
            clone.lora[layer] = peft.LoRAAdapter(
                layer=adapter.layer, rank=adapter.rank, down=adapter.down.copy(), up=adapter.up.copy()
            )
        for layer, adapter in self.colora.items():
            clone.colora[layer] = peft.CoLoRAAdapter(
                layer=adapter.layer,
                rank=adapter.rank,
                core=adapter.core.copy(),
                channel_out=adapter.channel_out.copy(),
                channel_in=adapter.channel_in.copy(),
                spec=adapter.spec,
            )
        return clone

    # -- forward -----------------------------------------------------------

    def _linear(self, tokens, layer: str, get):
        out = ad.add(ad.matmul(tokens, get(f"{layer}.weight")), get(f"{layer}.bias"))
        if layer in self.lora:
            out = ad.add(
                out,
                ad.matmul(ad.matmul(tokens, get(f"lora.{layer}.down")), get(f"lora.{layer}.up")),
            )
        return out

    def _conv(self, grid, layer: str, spec: ConvSpec, get):
        out = ad.conv2d(grid, get(f"{layer}.weight"), spec, get(f"{layer}.bias"))
        if layer in self.colora:
            delta = peft.conv_delta(
                grid,
                get(f"colora.{layer}.core"),
                get(f"colora.{layer}.channel_out"),
                get(f"colora.{layer}.channel_in"),
                spec,
            )
            out = ad.add(out, delta)
        return out

    def forward_with(self, x, overrides=None):
        """Forward pass reading parameters through ``overrides`` when given.

        Returns a plain (1, h, w) array, or an autodiff node when any
        override is a node.
        """
        cfg = self.config
        xv = ad.value_of(x)
        if xv.shape != (3, cfg.image_height, cfg.image_width):
            raise ShapeError(
                f"input must have shape (3, {cfg.image_height}, {cfg.image_width}), got {xv.shape}"
            )
        overrides = overrides or {}

        def get(name):
            return overrides[name] if name in overrides else self.get_value(name)

        th, tw, p = cfg.tokens_h, cfg.tokens_w, cfg.patch_size
        patches = ad.reshape(x, (3, th, p, tw, p))
        patches = ad.moveaxis(patches, (1, 3), (0, 1))
        tokens = self._linear(ad.reshape(patches, (th * tw, cfg.patch_dim)), "patch_embed", get)

        scale = 1.0 / np.sqrt(cfg.embed_dim)
        for b in range(cfg.blocks):
            pre = f"blocks.{b}"
            normed = _layer_norm(tokens, get(f"{pre}.ln1.scale"), get(f"{pre}.ln1.shift"))
            q = self._linear(normed, f"{pre}.attn.q", get)
            k = self._linear(normed, f"{pre}.attn.k", get)
            v = self._linear(normed, f"{pre}.attn.v", get)
            weights = ad.softmax(ad.multiply(ad.matmul(q, ad.moveaxis(k, 0, 1)), scale), axis=1)
            attended = self._linear(ad.matmul(weights, v), f"{pre}.attn.out", get)
            tokens = ad.add(tokens, ad.multiply(get(f"{pre}.gamma_attn"), attended))

            normed = _layer_norm(tokens, get(f"{pre}.ln2.scale"), get(f"{pre}.ln2.shift"))
            hidden = _gelu(self._linear(normed, f"{pre}.mlp.fc1", get))
            mlp_out = self._linear(hidden, f"{pre}.mlp.fc2", get)
            tokens = ad.add(tokens, ad.multiply(get(f"{pre}.gamma_mlp"), mlp_out))

        grid = ad.moveaxis(ad.reshape(tokens, (th, tw, cfg.embed_dim)), 2, 0)
        grid = ad.upsample_nearest(grid, p)
        for layer, _, _, _, spec in self.conv_layers()[:-1]:
            grid = _gelu(self._conv(grid, layer, spec, get))
        out_layer, _, _, _, out_spec = self.conv_layers()[-1]
        return ad.softplus(self._conv(grid, out_layer, out_spec, get))

    def forward(self, x) -> np.ndarray:
        """Pure forward pass: strictly positive (1, h, w) disparity map."""
        return ad.value_of(self.forward_with(x))


def build_model(config: ModelConfig) -> ToyDepthNet:
    """Deterministic Glorot-Gaussian initialization from the config seed.

    Biases and layer-norm shifts start at zero, scales and the per-branch
    scalar factors at one.
    """
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}

    def glorot(shape, fan_in, fan_out):
        return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

    params["patch_embed.weight"] = glorot((config.patch_dim, config.embed_dim), config.patch_dim, config.embed_dim)
    params["patch_embed.bias"] = np.zeros(config.embed_dim)
    for b in range(config.blocks):
        pre = f"blocks.{b}"
        params[f"{pre}.ln1.scale"] = np.ones(config.embed_dim)
        params[f"{pre}.ln1.shift"] = np.zeros(config.embed_dim)
        for head in ("q", "k", "v", "out"):
            params[f"{pre}.attn.{head}.weight"] = glorot(
                (config.embed_dim, config.embed_dim), config.embed_dim, config.embed_dim
            )
            params[f"{pre}.attn.{head}.bias"] = np.zeros(config.embed_dim)
        params[f"{pre}.ln2.scale"] = np.ones(config.embed_dim)
        params[f"{pre}.ln2.shift"] = np.zeros(config.embed_dim)
        params[f"{pre}.mlp.fc1.weight"] = glorot(
            (config.embed_dim, config.mlp_hidden), config.embed_dim, config.mlp_hidden
        )
        params[f"{pre}.mlp.fc1.bias"] = np.zeros(config.mlp_hidden)
        params[f"{pre}.mlp.fc2.weight"] = glorot(
            (config.mlp_hidden, config.embed_dim), config.mlp_hidden, config.embed_dim
        )
        params[f"{pre}.mlp.fc2.bias"] = np.zeros(config.embed_dim)
        params[f"{pre}.gamma_attn"] = np.ones(())
        params[f"{pre}.gamma_mlp"] = np.ones(())

    cin = config.embed_dim
    for i, cout in enumerate(config.decoder_channels):
        params[f"decoder.conv{i}.weight"] = glorot((cout, cin, 3, 3), cin * 9, cout * 9)
        params[f"decoder.conv{i}.bias"] = np.zeros(cout)
        cin = cout
    params["decoder.out.weight"] = glorot((1, cin, 3, 3), cin * 9, 9)
    params["decoder.out.bias"] = np.zeros(1)
    return ToyDepthNet(config, params)


_CONFIG_FIELDS = (
    "image_height",
    "image_width",
    "patch_size",
    "embed_dim",
    "blocks",
    "mlp_hidden",
    "seed",
)


def save_model(dirpath: str, model: ToyDepthNet) -> None:
    """One tensor file per base parameter plus a manifest with the config."""
    os.makedirs(dirpath, exist_ok=True)
    lines = [f"{name} = {getattr(model.config, name)}" for name in _CONFIG_FIELDS]
    lines.append("decoder_channels = " + " ".join(str(c) for c in model.config.decoder_channels))
    lines.append("params:")
    for name, value in model.params.items():
        save_tensor(os.path.join(dirpath, f"{name}.tnsr"), value)
        lines.append(name)
    with open(os.path.join(dirpath, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(dirpath: str) -> ToyDepthNet:
    manifest = os.path.join(dirpath, "manifest.txt")
    with open(manifest, encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    fields: dict[str, object] = {}
    names: list[str] = []
    in_params = False
    for line in lines:
        if line == "params:":
            in_params = True
            continue
        if in_params:
            names.append(line)
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key == "decoder_channels":
            fields[key] = tuple(int(tok) for tok in re.split(r"\s+", raw))
        else:
            fields[key] = int(raw)
    config = ModelConfig(**fields)
    params = {name: load_tensor(os.path.join(dirpath, f"{name}.tnsr")) for name in names}
    return ToyDepthNet(config, params)
