"""Small 3D encoder-decoder used as both student and teacher.

Layout (``w`` = base width, ``P`` = patch, ``L`` = depth)::

    volume [B,1,D,H,W]
      embed      conv k=P stride=P            -> w      @ D/P   (tokens)
      (mask tokens with H_xi when a mask is given)
      enc0       conv3 + norm + relu          -> w      @ D/P   (skip 0)
      down{s}    conv k=2 stride=2 + norm + relu, conv3 + norm + relu
                                              -> w*2^s  @ D/(P*2^s)   (skip s)
      up{s}      upsample x2, concat skip s-1, conv3 + norm + relu
                                              -> w*2^(s-1)
      refine     upsample xP/2, conv3 + norm + relu -> w  @ D/2
      head       upsample x2, conv1           -> C logits @ D

When some patch extent is odd the refine stage is skipped and the head
upsamples by P directly.

Every spatial stage keeps at least two voxels so instance norm is defined.
Convolutions feeding a norm carry no bias: the norm would cancel it, leaving
a parameter whose gradient is identically zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import seeding
from .autodiff import Tensor, concat, conv3d, instance_norm, relu, upsample_nearest3d
from .errors import ConfigError, ShapeError
from .masking import GridArg, apply_mask, mask_voxels, tokens_from_volume, volume_from_tokens

ParameterSet = dict[str, Tensor]

MASK_TOKEN = "mask_token"
MASK_VALUE = "mask_value"


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    num_classes: int = 4
    patch: tuple[int, int, int] = (4, 4, 4)  # (P1, P2, P3) along (H, W, D)
    base_width: int = 8
    depth: int = 2
    seed: int = 0
    mask_space: str = "token"  # "token" or "voxel"
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ConfigError(f"patch must be three positive extents, got {self.patch}")
        if self.base_width < 1 or self.depth < 0:
            raise ConfigError("base_width must be positive and depth non-negative")
        if self.mask_space not in ("token", "voxel"):
            raise ConfigError(f"mask_space must be 'token' or 'voxel', got {self.mask_space!r}")

    @property
    def kernel_patch(self) -> tuple[int, int, int]:
        """Patch extents in array axis order (D, H, W)."""
        p1, p2, p3 = self.patch
        return (p3, p1, p2)

    @property
    def has_refine(self) -> bool:
        return all(p % 2 == 0 for p in self.patch)

    def check_extents(self, extents) -> None:
        """Raise unless ``(D, H, W)`` is divisible by patch * 2**depth on every axis."""
        D, H, W = extents
        mult = 2 ** self.depth
        for name, e, p in zip("DHW", (D, H, W), self.kernel_patch):
            if e % (p * mult):
                raise ShapeError(f"extent {name}={e} is not divisible by patch*2^depth = {p * mult}")
            if self.depth and e // (p * mult) < 1:
                raise ShapeError(f"extent {name}={e} too small")
        bottleneck = np.prod([e // (p * mult) for e, p in zip((D, H, W), self.kernel_patch)])
        if bottleneck < 2:
            raise ShapeError(f"extents {extents} leave fewer than two voxels at the bottleneck")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"] = list(self.patch)
        return d


def _widths(cfg: NetConfig) -> list[int]:
    return [cfg.base_width * 2 ** s for s in range(cfg.depth + 1)]


def layer_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in construction order."""
    w = _widths(cfg)
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cin, cout, k, bias=True):
        k = (k,) * 3 if isinstance(k, int) else tuple(k)
        shapes[f"{name}.weight"] = (cout, cin) + k
        if bias:
            shapes[f"{name}.bias"] = (cout,)

    def norm(name, c):
        shapes[f"{name}.gain"] = (c,)
        shapes[f"{name}.shift"] = (c,)

    conv("embed", cfg.in_channels, w[0], cfg.kernel_patch)
    conv("enc0.conv", w[0], w[0], 3, bias=False)
    norm("enc0.norm", w[0])
    for s in range(1, cfg.depth + 1):
        conv(f"down{s}.conv1", w[s - 1], w[s], 2, bias=False)
        norm(f"down{s}.norm1", w[s])
        conv(f"down{s}.conv2", w[s], w[s], 3, bias=False)
        norm(f"down{s}.norm2", w[s])
    for s in range(cfg.depth, 0, -1):
        conv(f"up{s}.conv", w[s] + w[s - 1], w[s - 1], 3, bias=False)
        norm(f"up{s}.norm", w[s - 1])
    if cfg.has_refine:
        conv("refine.conv", w[0], w[0], 3, bias=False)
        norm("refine.norm", w[0])
    conv("head", w[0], cfg.num_classes, 1)
    if cfg.mask_space == "token":
        shapes[MASK_TOKEN] = (w[0],)
    else:
        shapes[MASK_VALUE] = (1,)
    return shapes


def build(cfg: NetConfig, dtype=np.float32) -> ParameterSet:
    """Deterministically initialize a student parameter set from ``cfg.seed``.

    Convolutions draw from U(-sqrt(1/fan_in), sqrt(1/fan_in)), norms start at
    gain 1 / shift 0, and the mask embedding from N(0, 0.02^2).
    """
    gen = seeding.rng(cfg.seed, "init")
    params: ParameterSet = {}
    fan_in: dict[str, int] = {}
    for name, shape in layer_shapes(cfg).items():
        layer = name.rsplit(".", 1)[0]
        if name.endswith(".weight"):
            fan_in[layer] = int(np.prod(shape[1:]))
            bound = np.sqrt(1.0 / fan_in[layer])
            value = gen.uniform(-bound, bound, size=shape)
        elif name.endswith(".bias"):
            bound = np.sqrt(1.0 / fan_in[layer])
            value = gen.uniform(-bound, bound, size=shape)
        elif name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".shift"):
            value = np.zeros(shape)
        else:
            value = gen.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


def copy_params(params: ParameterSet, requires_grad: bool = False) -> ParameterSet:
    """Value copy, used to create the teacher from the student."""
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad, name=k) for k, v in params.items()}


def count_params(params: ParameterSet) -> int:
    return int(sum(t.size for t in params.values()))


def _conv(params, name, x, stride=1, pad=0):
    return conv3d(x, params[f"{name}.weight"], params.get(f"{name}.bias"), stride=stride, pad=pad)


def _norm_relu(params, name, x, eps):
    return relu(instance_norm(x, params[f"{name}.gain"], params[f"{name}.shift"], eps))


def forward(params: ParameterSet, volume, cfg: NetConfig, mask: Optional[GridArg] = None) -> Tensor:
    """Voxel-wise class logits ``[B, C, D, H, W]`` for ``volume[B, Cin, D, H, W]``.

    With ``mask`` the masked input view is produced inside the network: in
    token space the patch embeddings of masked cells are replaced by the mask
    embedding, in voxel space the raw voxels are replaced by a learnable scalar.
    Without a mask the mask parameters take no part in the computation.
    """
    x = volume if isinstance(volume, Tensor) else Tensor(volume)
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input [B, {cfg.in_channels}, D, H, W], got {x.shape}")
    cfg.check_extents(x.shape[2:])
    eps = cfg.norm_eps

    if mask is not None and cfg.mask_space == "voxel":
        x = mask_voxels(x, mask, params[MASK_VALUE])

    h = conv3d(x, params["embed.weight"], params["embed.bias"], stride=cfg.kernel_patch)
    if mask is not None and cfg.mask_space == "token":
        grid_shape = h.shape[2:]
        h = volume_from_tokens(apply_mask(tokens_from_volume(h), mask, params[MASK_TOKEN]), grid_shape)

    h = _norm_relu(params, "enc0.norm", _conv(params, "enc0.conv", h, pad=1), eps)
    skips = [h]
    for s in range(1, cfg.depth + 1):
        h = _norm_relu(params, f"down{s}.norm1", _conv(params, f"down{s}.conv1", h, stride=2), eps)
        h = _norm_relu(params, f"down{s}.norm2", _conv(params, f"down{s}.conv2", h, pad=1), eps)
        skips.append(h)
    for s in range(cfg.depth, 0, -1):
        h = concat([upsample_nearest3d(h, 2), skips[s - 1]], axis=1)
        h = _norm_relu(params, f"up{s}.norm", _conv(params, f"up{s}.conv", h, pad=1), eps)
    if cfg.has_refine:
        h = upsample_nearest3d(h, tuple(p // 2 for p in cfg.kernel_patch))
        h = _norm_relu(params, "refine.norm", _conv(params, "refine.conv", h, pad=1), eps)
        h = upsample_nearest3d(h, 2)
    else:
        h = upsample_nearest3d(h, cfg.kernel_patch)
    return _conv(params, "head", h)
