"""The segmentation / reconstruction network.

* a small ViT backbone, frozen after initialisation;
* a five-layer convolutional extractor producing one query token per backbone
  token;
* injectors that cross-attend from those queries into backbone tokens and add
  the result back residually after selected blocks;
* a convolutional pixel decoder for segmentation logits;
* a multi-stage dilated-conv (ASPP-style) decoder, or a single linear head,
  for image reconstruction.

All modules work on batched inputs ``(N, C, H, W)``; single images
``(C, H, W)`` are accepted and returned without the batch axis.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .nn import Conv2d, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .style import VisualPrompt
from .tensor import Tensor

INJECTORS = ("cross_attention", "ffn")
MIM_DECODERS = ("aspp", "linear", "none")


@dataclass
class BackboneConfig:
    image_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    taps: tuple[int, ...] = (0, 1, 2, 3)
    inject: tuple[int, ...] | None = None  # defaults to the taps

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        self.taps = tuple(int(t) for t in self.taps)
        self.inject = self.taps if self.inject is None else tuple(int(i) for i in self.inject)
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"embed dim {self.dim} not divisible by {self.heads} heads")
        for name, idx in (("stage tap", self.taps), ("injection", self.inject)):
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise ConfigurationError(f"{name} indices must be strictly increasing, got {idx}")
            if idx and (idx[0] < 0 or idx[-1] >= self.depth):
                raise ConfigurationError(f"{name} indices {idx} out of range for depth {self.depth}")
        h, w = self.image_size
        if self.patch < 1 or h % self.patch or w % self.patch:
            raise ConfigurationError(f"image size {self.image_size} not divisible by patch size {self.patch}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch, self.image_size[1] // self.patch

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 3
    use_gse: bool = True
    injector: str = "cross_attention"
    mim_decoder: str = "aspp"
    gse_channels: tuple[int, ...] = (16, 32, 64)
    decoder_channels: int = 32
    aspp_channels: int = 16
    train_visual_prompt: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.gse_channels = tuple(self.gse_channels)
        if self.injector not in INJECTORS:
            raise ConfigurationError(f"injector must be one of {INJECTORS}, got {self.injector!r}")
        if self.mim_decoder not in MIM_DECODERS:
            raise ConfigurationError(f"mim_decoder must be one of {MIM_DECODERS}, got {self.mim_decoder!r}")
        if self.num_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if self.mim_decoder == "aspp" and not self.backbone.taps:
            raise ConfigurationError("the ASPP reconstruction decoder needs at least one stage tap")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["image_size"] = list(d["backbone"]["image_size"])
        return d


def _batched(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 3:
        return x.reshape(1, *x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W) image, got {x.shape}")
    return x, False


def tokens_to_map(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    n, L, d = tokens.shape
    return T.transpose(tokens.reshape(n, grid[0], grid[1], d), (0, 3, 1, 2))


def map_to_tokens(fmap: Tensor) -> Tensor:
    n, d, h, w = fmap.shape
    return T.transpose(fmap, (0, 2, 3, 1)).reshape(n, h * w, d)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

class Block(Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int, rng, dtype):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.fc1 = Linear(d, d * mlp_ratio, rng, dtype)
        self.fc2 = Linear(d * mlp_ratio, d, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.fc2(T.gelu(self.fc1(self.ln2(x))))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, dtype=T.DEFAULT_DTYPE):
        self.cfg = cfg
        p, c, d = cfg.patch, cfg.in_channels, cfg.dim
        self.patch_embed = Linear(c * p * p, d, rng, dtype)
        self.pos_embed = Parameter((0.02 * rng.standard_normal((cfg.tokens, d))).astype(dtype))
        self.blocks = [Block(d, cfg.heads, cfg.mlp_ratio, rng, dtype) for _ in range(cfg.depth)]

    def patchify(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        p = self.cfg.patch
        x = x.reshape(n, c, h // p, p, w // p, p)
        return T.transpose(x, (0, 2, 4, 1, 3, 5)).reshape(n, (h // p) * (w // p), c * p * p)

    def forward(self, x: Tensor, injectors=None) -> list[Tensor]:
        """Stage features after each tap; ``injectors`` maps block index to a
        callable returning a residual enhancement for the current tokens."""
        if x.shape[-2:] != self.cfg.image_size or x.shape[-3] != self.cfg.in_channels:
            h, w = x.shape[-2:]
            if h % self.cfg.patch or w % self.cfg.patch:
                raise ConfigurationError(f"image {x.shape} not divisible by patch size {self.cfg.patch}")
            raise DimensionError(f"backbone built for {self.cfg.in_channels}x{self.cfg.image_size}, got {x.shape}")
        tokens = self.patch_embed(self.patchify(x)) + self.pos_embed
        taps = set(self.cfg.taps)
        feats = []
        for i, blk in enumerate(self.blocks):
            tokens = blk(tokens)
            if injectors is not None and i in injectors:
                tokens = tokens + injectors[i](tokens)
            if i in taps:
                feats.append(tokens)
        return feats


# ---------------------------------------------------------------------------
# geospatial query extractor and injectors
# ---------------------------------------------------------------------------

def gse_strides(patch: int, layers: int = 5) -> list[int]:
    """Distribute the patch size over per-layer strides (first layer keeps full resolution)."""
    factors = []
    n, f = patch, 2
    while n > 1:
        while n % f == 0:
            factors.append(f)
            n //= f
        f += 1
    slots = layers - 1
    while len(factors) > slots:
        factors = sorted(factors)
        factors = [factors[0] * factors[1]] + factors[2:]
    strides = [1] * layers
    for i, s in enumerate(sorted(factors)):
        strides[1 + i] = s
    return strides


class GeoSemanticExtractor(Module):
    """Five 3x3 conv + ReLU layers landing on the backbone token grid."""

    def __init__(self, in_channels: int, dim: int, patch: int, rng, channels=(16, 32, 64), dtype=T.DEFAULT_DTYPE):
        plan = [in_channels, *channels, dim, dim]
        if len(plan) != 6:
            raise ConfigurationError(f"GSE channel plan must have 3 hidden widths, got {channels}")
        self.plan = plan
        self.strides = gse_strides(patch)
        self.convs = [Conv2d(plan[i], plan[i + 1], 3, rng, stride=self.strides[i], padding=1, dtype=dtype)
                      for i in range(5)]

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = T.relu(conv(h))
        return map_to_tokens(h)

    @staticmethod
    def expected_count(plan) -> int:
        return sum(Conv2d.count(plan[i], plan[i + 1], 3) for i in range(len(plan) - 1))


class CrossAttentionInjector(Module):
    """Queries from the extractor attend over backbone tokens; zero-initialised output projection."""

    def __init__(self, d: int, heads: int, rng, dtype=T.DEFAULT_DTYPE):
        self.attn = MultiHeadAttention(d, heads, rng, dtype, zero_out=True)

    def forward(self, q: Tensor, feat: Tensor) -> Tensor:
        if q.shape[-1] != feat.shape[-1]:
            raise DimensionError(f"query width {q.shape[-1]} != token width {feat.shape[-1]}")
        return self.attn(q, feat, feat)


class FFNInjector(Module):
    """Two-layer feed-forward enhancement of the tokens; ignores the queries."""

    def __init__(self, d: int, rng, dtype=T.DEFAULT_DTYPE, hidden_ratio: int = 2):
        self.fc1 = Linear(d, d * hidden_ratio, rng, dtype)
        self.fc2 = Linear(d * hidden_ratio, d, rng, dtype, zero_init=True)

    def forward(self, q: Tensor, feat: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(feat)))


def injector_forward(q: Tensor, feat: Tensor, params: Module) -> Tensor:
    return params(q, feat)


# ---------------------------------------------------------------------------
# decoders
# ---------------------------------------------------------------------------

class SegDecoder(Module):
    """Final-stage tokens -> two conv+upsample stages -> 1x1 classifier."""

    def __init__(self, d: int, channels: int, num_classes: int, rng, dtype=T.DEFAULT_DTYPE):
        self.conv1 = Conv2d(d, channels, 3, rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, rng, dtype=dtype)
        self.head = Conv2d(channels, num_classes, 1, rng, dtype=dtype)

    def forward(self, tokens: Tensor, grid: tuple[int, int], out_size: tuple[int, int]) -> Tensor:
        h = T.relu(self.conv1(tokens_to_map(tokens, grid)))
        h = T.bilinear_resize(h, (2 * grid[0], 2 * grid[1]))
        h = T.relu(self.conv2(h))
        h = T.bilinear_resize(h, out_size)
        return self.head(h)


class ASPPDecoder(Module):
    """One dilated 3x3 branch per backbone stage (dilation 2**i), concatenated,
    fused by a 1x1 conv, projected per pixel to image channels and resized."""

    def __init__(self, d: int, n_stages: int, channels: int, out_channels: int, rng, dtype=T.DEFAULT_DTYPE):
        if n_stages < 1:
            raise ConfigurationError("ASPP decoder needs at least one stage")
        self.branches = [Conv2d(d, channels, 3, rng, dilation=2 ** i, dtype=dtype) for i in range(n_stages)]
        self.fuse = Conv2d(channels * n_stages, channels, 1, rng, dtype=dtype)
        self.proj = Conv2d(channels, out_channels, 1, rng, dtype=dtype)

    def forward(self, feats: list[Tensor], grid: tuple[int, int], out_size: tuple[int, int]) -> Tensor:
        if len(feats) != len(self.branches):
            raise DimensionError(f"{len(feats)} stage features for {len(self.branches)} branches")
        outs = [T.relu(b(tokens_to_map(f, grid))) for b, f in zip(self.branches, feats)]
        h = T.relu(self.fuse(T.concat(outs, axis=1)))
        return T.bilinear_resize(self.proj(h), out_size)


class LinearMIMDecoder(Module):
    """Final-stage tokens -> one linear map to patch pixels."""

    def __init__(self, d: int, patch: int, out_channels: int, rng, dtype=T.DEFAULT_DTYPE):
        self.patch = patch
        self.out_channels = out_channels
        self.proj = Linear(d, out_channels * patch * patch, rng, dtype)

    def forward(self, feats: list[Tensor], grid: tuple[int, int], out_size: tuple[int, int]) -> Tensor:
        x = self.proj(feats[-1])
        n = x.shape[0]
        p, c = self.patch, self.out_channels
        x = x.reshape(n, grid[0], grid[1], c, p, p)
        return T.transpose(x, (0, 3, 1, 4, 2, 5)).reshape(n, c, grid[0] * p, grid[1] * p)


# ---------------------------------------------------------------------------
# the bundle
# ---------------------------------------------------------------------------

class ModelBundle(Module):
    """Frozen backbone plus every trainable component.

    Initialisation draws from independent per-component streams spawned from
    ``seed``, so enabling or disabling a component never changes the weights
    of the others.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        bc = cfg.backbone
        dtype = np.dtype(cfg.dtype)
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)]
        self.backbone = Backbone(bc, streams[0], dtype)
        self.backbone.freeze()
        self.gse = None
        self.injectors = []
        if cfg.use_gse:
            self.gse = GeoSemanticExtractor(bc.in_channels, bc.dim, bc.patch, streams[1], cfg.gse_channels, dtype)
            if cfg.injector == "cross_attention":
                self.injectors = [CrossAttentionInjector(bc.dim, bc.heads, streams[2], dtype) for _ in bc.inject]
            else:
                self.injectors = [FFNInjector(bc.dim, streams[2], dtype) for _ in bc.inject]
        self.seg_decoder = SegDecoder(bc.dim, cfg.decoder_channels, cfg.num_classes, streams[3], dtype)
        self.mim_decoder = None
        if cfg.mim_decoder == "aspp":
            self.mim_decoder = ASPPDecoder(bc.dim, len(bc.taps), cfg.aspp_channels, bc.in_channels, streams[4], dtype)
        elif cfg.mim_decoder == "linear":
            self.mim_decoder = LinearMIMDecoder(bc.dim, bc.patch, bc.in_channels, streams[4], dtype)
        self.prompt = VisualPrompt((bc.in_channels, *bc.image_size), trainable=cfg.train_visual_prompt, dtype=dtype)

    # -- parameter groups ---------------------------------------------------
    def groups(self) -> dict[str, list[str]]:
        """Parameter names by component."""
        out: dict[str, list[str]] = {}
        for name, _ in self.named_parameters():
            out.setdefault(name.split(".")[0], []).append(name)
        return out

    def trainable_names(self) -> set[str]:
        return {n for n, p in self.named_parameters() if p.requires_grad}

    # -- forward passes -----------------------------------------------------
    def _injector_map(self, x: Tensor):
        if self.gse is None:
            return None
        q = self.gse(x)
        return {idx: (lambda feat, inj=inj: inj(q, feat))
                for idx, inj in zip(self.cfg.backbone.inject, self.injectors)}

    def backbone_forward(self, x, inject: bool = True) -> list[Tensor]:
        xb, _ = _batched(x)
        return self.backbone(xb, self._injector_map(xb) if inject else None)

    def seg_forward(self, x, u: int = 0, x_s=None) -> Tensor:
        """Segmentation logits ``(N, K, H, W)`` for ``x`` (gate 0) or ``x_s`` (gate 1)."""
        if u not in (0, 1):
            raise ContractError(f"gate must be 0 or 1, got {u}")
        if u == 1:
            if x_s is None:
                raise ContractError("gate u=1 requires the styled image")
            x = x_s
        xb, single = _batched(x)
        feats = self.backbone(xb, self._injector_map(xb))
        bc = self.cfg.backbone
        if not feats:
            raise ConfigurationError("segmentation needs at least one stage tap")
        logits = self.seg_decoder(feats[-1], bc.grid, bc.image_size)
        return logits.reshape(*logits.shape[1:]) if single else logits

    def mim_forward(self, *inputs) -> list[Tensor]:
        """Reconstruct each input from pure-backbone features (extractor and injectors off)."""
        if self.mim_decoder is None:
            raise ConfigurationError("model was built without a reconstruction decoder")
        batches = [_batched(x) for x in inputs]
        sizes = [b.shape[0] for b, _ in batches]
        xb = T.concat([b for b, _ in batches], axis=0) if len(batches) > 1 else batches[0][0]
        bc = self.cfg.backbone
        feats = self.backbone(xb, None)
        rec = self.mim_decoder(feats, bc.grid, bc.image_size)
        outs, start = [], 0
        for (b, single), n in zip(batches, sizes):
            part = rec[start:start + n] if len(batches) > 1 else rec
            start += n
            outs.append(part.reshape(*part.shape[1:]) if single else part)
        return outs

    def forward(self, x) -> Tensor:
        return self.seg_forward(x)


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelBundle:
    return ModelBundle(cfg, seed)
