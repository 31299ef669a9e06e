"""Encoder-decoder composition around the hyperconvolution operators.

The encoder runs a shared single-channel stem over every input marker
(markers ride the batch axis), concatenates the per-marker features,
fuses them with the encoder hyperconvolution, and reduces with a
ConvNeXt-v2-style backbone to a fixed-width latent map.  The decoder
maps the latent through per-marker generated kernels and a shared head
that upsamples via pixel shuffle to a mean and a log-variance raster
per requested marker.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .hyperconv import KernelGeneratorTable, decoder_hyperconv, encoder_hyperconv
from .markers import MarkerSet, MarkerVocabulary


@dataclass(frozen=True)
class NetworkConfig:
    """Channel widths, block counts, and resolution arithmetic.

    ``downsample`` is the side factor of each downsampler (stem plus one
    per stage), so the latent side is crop_size / downsample**(1+stages)
    and the head's total upsampling factor equals that same product.
    """

    d_ma: int = 16
    d_pm: int = 192
    d_lat: int = 768
    d_ms: int = 512
    stem_blocks: int = 6
    stage_blocks: int = 6
    head_blocks: int = 1
    stage_dims: tuple = (384, 768)
    downsample: int = 2
    crop_size: int = 128

    def __post_init__(self):
        widths = (self.d_ma, self.d_pm, self.d_lat, self.d_ms) + tuple(self.stage_dims)
        if min(widths) < 1:
            raise ValueError("all channel widths must be positive")
        if self.downsample < 2:
            raise ValueError("downsample side factor must be >= 2")
        expected = self.stage_dims[-1] if self.stage_dims else self.d_pm
        if self.d_lat != expected:
            raise ValueError(
                f"d_lat={self.d_lat} must equal the final backbone width {expected}")
        if self.crop_size % self.total_downsample:
            raise ValueError(
                f"crop_size {self.crop_size} not divisible by the total "
                f"downsample factor {self.total_downsample}")

    @property
    def total_downsample(self):
        return self.downsample ** (1 + len(self.stage_dims))

    @property
    def upsample(self):
        """Head pixel-shuffle factor (equals the total downsample)."""
        return self.total_downsample

    @property
    def latent_side(self):
        return self.crop_size // self.total_downsample

    @classmethod
    def base(cls):
        """Reference-scale configuration (latent 768 @ 16x16 from 128x128)."""
        return cls()

    @classmethod
    def tiny(cls):
        """Desk-scale preset used by the synthetic experiments."""
        return cls(d_ma=4, d_pm=16, d_lat=32, d_ms=16, stem_blocks=1,
                   stage_blocks=1, head_blocks=1, stage_dims=(32,),
                   downsample=2, crop_size=32)

    def to_dict(self):
        return {
            "d_ma": self.d_ma, "d_pm": self.d_pm, "d_lat": self.d_lat,
            "d_ms": self.d_ms, "stem_blocks": self.stem_blocks,
            "stage_blocks": self.stage_blocks, "head_blocks": self.head_blocks,
            "stage_dims": list(self.stage_dims), "downsample": self.downsample,
            "crop_size": self.crop_size,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stage_dims"] = tuple(d.get("stage_dims", ()))
        return cls(**d)


@dataclass
class HeteroPrediction:
    """Paired mean (post-sigmoid, strictly inside (0,1)) and raw
    log-variance rasters for an ordered target marker set."""

    mean: T.Tensor
    log_var: T.Tensor
    markers: MarkerSet = field(default=None)

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise DimensionError("mean and log-variance shapes differ")


def convnext_block(x, params):
    """Residual block: depthwise 7x7 -> channel LN -> 1x1 expand (4x) ->
    gelu -> global response norm -> 1x1 project -> skip connection."""
    c = x.shape[0] if x.ndim == 3 else x.shape[1]
    h = T.conv2d(x, params["dw.w"], T.ConvSpec(1, 3, c))
    h = T.add_bias(h, params["dw.b"])
    h = T.layer_norm_channels(h, params["norm.g"], params["norm.b"])
    h = T.add_bias(T.conv2d(h, params["pw1.w"]), params["pw1.b"])
    h = T.gelu(h)
    h = T.grn(h, params["grn.g"], params["grn.b"])
    h = T.add_bias(T.conv2d(h, params["pw2.w"]), params["pw2.b"])
    return x + h


class Model:
    """Full encoder-decoder with a flat named-parameter registry."""

    def __init__(self, vocab, config, rng=None, dtype=np.float32):
        if not isinstance(vocab, MarkerVocabulary):
            raise TypeError("vocab must be a MarkerVocabulary")
        self.vocab = vocab
        self.config = config
        self.dtype = dtype
        self.params = OrderedDict()
        rng = rng if rng is not None else np.random.default_rng(0)
        self._build(rng)

    # -- construction ----------------------------------------------------
    def _param(self, name, array):
        t = T.Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _trunc_normal(self, rng, shape, std=0.02):
        return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)

    def _block_params(self, rng, prefix, width):
        self._param(f"{prefix}.dw.w", self._trunc_normal(rng, (width, 1, 7, 7)))
        self._param(f"{prefix}.dw.b", np.zeros(width))
        self._param(f"{prefix}.norm.g", np.ones(width))
        self._param(f"{prefix}.norm.b", np.zeros(width))
        self._param(f"{prefix}.pw1.w", self._trunc_normal(rng, (4 * width, width, 1, 1)))
        self._param(f"{prefix}.pw1.b", np.zeros(4 * width))
        self._param(f"{prefix}.grn.g", np.zeros(4 * width))
        self._param(f"{prefix}.grn.b", np.zeros(4 * width))
        self._param(f"{prefix}.pw2.w", self._trunc_normal(rng, (width, 4 * width, 1, 1)))
        self._param(f"{prefix}.pw2.b", np.zeros(width))

    def _build(self, rng):
        cfg = self.config
        ds = cfg.downsample
        self._param("stem.conv.w", self._trunc_normal(rng, (cfg.d_ma, 1, ds, ds)))
        self._param("stem.conv.b", np.zeros(cfg.d_ma))
        self._param("stem.norm.g", np.ones(cfg.d_ma))
        self._param("stem.norm.b", np.zeros(cfg.d_ma))
        for i in range(cfg.stem_blocks):
            self._block_params(rng, f"stem.block{i}", cfg.d_ma)

        self.enc_gen = KernelGeneratorTable(
            "encoder", len(self.vocab), (cfg.d_pm, cfg.d_ma, 1, 1),
            rng=rng, dtype=self.dtype)
        self.params["enc_gen.table"] = self.enc_gen.table

        prev = cfg.d_pm
        for s, width in enumerate(cfg.stage_dims):
            self._param(f"stage{s}.down.norm.g", np.ones(prev))
            self._param(f"stage{s}.down.norm.b", np.zeros(prev))
            self._param(f"stage{s}.down.conv.w", self._trunc_normal(rng, (width, prev, ds, ds)))
            self._param(f"stage{s}.down.conv.b", np.zeros(width))
            for i in range(cfg.stage_blocks):
                self._block_params(rng, f"stage{s}.block{i}", width)
            prev = width

        self.dec_gen = KernelGeneratorTable(
            "decoder", len(self.vocab), (cfg.d_ms, cfg.d_lat, 1, 1),
            rng=rng, dtype=self.dtype)
        self.params["dec_gen.table"] = self.dec_gen.table

        for i in range(cfg.head_blocks):
            self._block_params(rng, f"head.block{i}", cfg.d_ms)
        lam = cfg.upsample
        self._param("head.out.w", self._trunc_normal(rng, (2 * lam * lam, cfg.d_ms, 1, 1)))
        # channels [0, lam^2) feed the mean plane, the rest the log-variance
        # plane (pixel shuffle is channel-major).  Start the mean near the
        # low end of [0,1] intensities and the variance at data scale so
        # early mean gradients are not drowned by sigma^2 = 1.
        out_b = np.zeros(2 * lam * lam)
        out_b[:lam * lam] = -2.0
        out_b[lam * lam:] = -3.0
        self._param("head.out.b", out_b)

    # -- registry helpers -------------------------------------------------
    def parameters(self):
        return self.params

    def num_params(self):
        return sum(p.size for p in self.params.values())

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def _block(self, prefix):
        keys = ("dw.w", "dw.b", "norm.g", "norm.b", "pw1.w", "pw1.b",
                "grn.g", "grn.b", "pw2.w", "pw2.b")
        return {k: self.params[f"{prefix}.{k}"] for k in keys}

    # -- forward passes ----------------------------------------------------
    def stem_forward(self, x):
        """Shared stem on a single-channel map [1,H,W] (or batched
        [N,1,H,W]): strided patch conv, channel LN, residual blocks."""
        cfg = self.config
        side = x.shape[-1]
        if x.shape[-2] % cfg.downsample or side % cfg.downsample:
            raise DimensionError(
                f"spatial dims {x.shape[-2:]} not divisible by {cfg.downsample}")
        h = T.conv2d(x, self.params["stem.conv.w"],
                     T.ConvSpec(cfg.downsample, 0, 1))
        h = T.add_bias(h, self.params["stem.conv.b"])
        h = T.layer_norm_channels(h, self.params["stem.norm.g"], self.params["stem.norm.b"])
        for i in range(cfg.stem_blocks):
            h = convnext_block(h, self._block(f"stem.block{i}"))
        return h

    def encode(self, x, markers):
        """Multiplex image [C,H,W] with its ordered marker set -> latent
        [d_lat, H/λ, W/λ]."""
        if not isinstance(x, T.Tensor):
            x = T.Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 3:
            raise DimensionError("expected a [C,H,W] image")
        c, height, width = x.shape
        if c != len(markers):
            raise ValueError(
                f"image has {c} channels but marker set has {len(markers)}")
        cfg = self.config
        if height % cfg.total_downsample or width % cfg.total_downsample:
            raise DimensionError(
                f"spatial dims {height}x{width} not divisible by {cfg.total_downsample}")
        # markers ride the batch axis through the shared stem
        h = self.stem_forward(T.reshape(x, (c, 1, height, width)))
        h = T.reshape(h, (c * cfg.d_ma, h.shape[2], h.shape[3]))
        v = encoder_hyperconv(self.enc_gen, h, markers)
        for s in range(len(cfg.stage_dims)):
            v = T.layer_norm_channels(
                v, self.params[f"stage{s}.down.norm.g"], self.params[f"stage{s}.down.norm.b"])
            v = T.conv2d(v, self.params[f"stage{s}.down.conv.w"],
                         T.ConvSpec(cfg.downsample, 0, 1))
            v = T.add_bias(v, self.params[f"stage{s}.down.conv.b"])
            for i in range(cfg.stage_blocks):
                v = convnext_block(v, self._block(f"stage{s}.block{i}"))
        return v

    def decode(self, z, markers):
        """Latent map -> per-marker mean/log-variance rasters."""
        if len(markers) == 0:
            raise ValueError("target marker set must be non-empty")
        cfg = self.config
        u = decoder_hyperconv(self.dec_gen, z, markers)
        for i in range(cfg.head_blocks):
            u = convnext_block(u, self._block(f"head.block{i}"))
        u = T.add_bias(T.conv2d(u, self.params["head.out.w"]), self.params["head.out.b"])
        u = T.pixel_shuffle(u, cfg.upsample)
        c_d = len(markers)
        h0, w0 = u.shape[2], u.shape[3]
        mean = T.reshape(T.narrow(u, 1, 0, 1), (c_d, h0, w0))
        log_var = T.reshape(T.narrow(u, 1, 1, 1), (c_d, h0, w0))
        mean = T.sigmoid(mean)
        return HeteroPrediction(mean, log_var, MarkerSet(markers))

    def forward_masked(self, x, in_set, tgt_set):
        """Masked-modelling pass: encode the (masked) input markers,
        decode predictions for every target marker."""
        in_set = MarkerSet(in_set)
        tgt_set = MarkerSet(tgt_set)
        if not in_set.issubset(tgt_set):
            raise ValueError("input marker set must be a subset of the target set")
        return self.decode(self.encode(x, in_set), tgt_set)

    def forward_masked_batch(self, items):
        """Batched masked-modelling pass over (x, in_set, tgt_set) triples
        sharing spatial dims; enforces the training-task contract
        in_set <= tgt_set."""
        for _, in_set, tgt_set in items:
            if not MarkerSet(in_set).issubset(MarkerSet(tgt_set)):
                raise ValueError("input marker set must be a subset of the target set")
        return self.forward_batch(items)

    def forward_batch(self, items):
        """Batched encode/decode over (x, in_set, tgt_set) triples sharing
        spatial dims, with no relation required between the two sets (the
        leave-one-out protocol decodes markers it never encoded).  The
        shared stem, backbone stages, and head each run once over stacked
        batch axes; only the hyperconvolutions are applied per sample.
        Equivalent to per-sample encode+decode up to float reassociation."""
        if not items:
            raise ValueError("empty batch")
        cfg = self.config
        triples = []
        for x, in_set, tgt_set in items:
            in_set = MarkerSet(in_set)
            tgt_set = MarkerSet(tgt_set)
            xd = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=self.dtype)
            if xd.ndim != 3 or xd.shape[0] != len(in_set):
                raise DimensionError("each sample must be [|in_set|, H, W]")
            triples.append((xd, in_set, tgt_set))
        height, width = triples[0][0].shape[1:]
        if any(t[0].shape[1:] != (height, width) for t in triples):
            raise DimensionError("batch samples must share spatial dims")

        xcat = np.concatenate([t[0] for t in triples], axis=0)
        stems = self.stem_forward(T.Tensor(xcat.reshape(-1, 1, height, width)))
        hs, ws = stems.shape[2], stems.shape[3]

        vs = []
        offset = 0
        for xd, in_set, _ in triples:
            c = len(in_set)
            h = T.reshape(T.narrow(stems, 0, offset, c), (c * cfg.d_ma, hs, ws))
            v = encoder_hyperconv(self.enc_gen, h, in_set)
            vs.append(T.reshape(v, (1, cfg.d_pm, hs, ws)))
            offset += c
        v = vs[0] if len(vs) == 1 else T.concat(vs, axis=0)
        for s in range(len(cfg.stage_dims)):
            v = T.layer_norm_channels(
                v, self.params[f"stage{s}.down.norm.g"], self.params[f"stage{s}.down.norm.b"])
            v = T.conv2d(v, self.params[f"stage{s}.down.conv.w"],
                         T.ConvSpec(cfg.downsample, 0, 1))
            v = T.add_bias(v, self.params[f"stage{s}.down.conv.b"])
            for i in range(cfg.stage_blocks):
                v = convnext_block(v, self._block(f"stage{s}.block{i}"))
        hl, wl = v.shape[2], v.shape[3]

        us = []
        for i, (_, _, tgt_set) in enumerate(triples):
            zi = T.reshape(T.narrow(v, 0, i, 1), (cfg.d_lat, hl, wl))
            us.append(decoder_hyperconv(self.dec_gen, zi, tgt_set))
        u = us[0] if len(us) == 1 else T.concat(us, axis=0)
        for i in range(cfg.head_blocks):
            u = convnext_block(u, self._block(f"head.block{i}"))
        u = T.add_bias(T.conv2d(u, self.params["head.out.w"]), self.params["head.out.b"])
        u = T.pixel_shuffle(u, cfg.upsample)

        preds = []
        offset = 0
        h0, w0 = u.shape[2], u.shape[3]
        for _, _, tgt_set in triples:
            k = len(tgt_set)
            rows = T.narrow(u, 0, offset, k)
            mean = T.sigmoid(T.reshape(T.narrow(rows, 1, 0, 1), (k, h0, w0)))
            log_var = T.reshape(T.narrow(rows, 1, 1, 1), (k, h0, w0))
            preds.append(HeteroPrediction(mean, log_var, tgt_set))
            offset += k
        return preds
