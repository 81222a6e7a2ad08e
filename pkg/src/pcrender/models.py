"""Trainable models and the quadrature oracle they are justified by.

* RadianceMLP: five linear layers (widths 256, 256, 256, 128, 8), relu
  hidden activations, linear output; the encoded view direction is
  concatenated to the activation after layer 2.
* RefineNet: gated-convolution encoder-decoder with four downsamplings,
  per-level widths 16..256 scaled by a width multiplier, skip connections
  by channel concatenation, sigmoid RGB head.
* volume_render_oracle: discrete transmittance quadrature over ray samples,
  used in tests to show that an opaque surface reduces the integral to a
  single evaluation at the surface sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ShapeError, ValidationError

MLP_WIDTHS = (256, 256, 256, 128, 8)
REFINE_WIDTHS = (16, 32, 64, 128, 256)
DIR_CONCAT_AFTER = 2  # direction encoding joins after this many layers


class RadianceMLP:
    """Maps encoded query coordinates and view directions to a latent feature.

    The coordinate branch carries one constant homogeneous channel in front
    of the encoded features, so the first layer sees coord_features + 1
    inputs (64 at the default 10-frequency encoding).
    """

    def __init__(self, coord_features=63, dir_features=27, widths=MLP_WIDTHS, seed=0):
        if not widths or any(w < 1 for w in widths):
            raise ValidationError(f"invalid layer widths {widths}")
        if len(widths) <= DIR_CONCAT_AFTER:
            raise ValidationError(
                f"need more than {DIR_CONCAT_AFTER} layers, got {len(widths)}"
            )
        self.coord_features = int(coord_features)
        self.dir_features = int(dir_features)
        self.widths = tuple(int(w) for w in widths)
        self.layers = []
        rng = np.random.default_rng(seed)
        fan_in = self.coord_features + 1
        # He-uniform: without the sqrt(6) gain the five relu layers shrink
        # activations ~sqrt(6)x each, and the refinement net then learns to
        # ignore the near-constant features instead of decoding them.
        gain = math.sqrt(6.0)
        for i, width in enumerate(self.widths):
            if i == DIR_CONCAT_AFTER:
                fan_in += self.dir_features
            w = ad.uniform_init(rng, (fan_in, width), fan_in, gain=gain)
            b = ad.uniform_init(rng, (width,), fan_in, gain=gain)
            self.layers.append((w, b))
            fan_in = width

    @property
    def out_width(self):
        return self.widths[-1]

    def forward(self, coords_enc, dirs_enc):
        if coords_enc.data.shape[1] != self.coord_features:
            raise ShapeError(
                f"encoded coords width {coords_enc.data.shape[1]} != "
                f"configured {self.coord_features}"
            )
        if dirs_enc.data.shape[1] != self.dir_features:
            raise ShapeError(
                f"encoded dirs width {dirs_enc.data.shape[1]} != "
                f"configured {self.dir_features}"
            )
        ones = ad.Tensor(np.ones((coords_enc.data.shape[0], 1)))
        x = ad.concat(ones, coords_enc, axis=-1)
        for i, (w, b) in enumerate(self.layers):
            if i == DIR_CONCAT_AFTER:
                x = ad.concat(x, dirs_enc, axis=-1)
            x = ad.linear(x, w, b)
            if i < len(self.layers) - 1:
                x = ad.relu(x)
        return x


def radiance_params(mlp):
    out = {}
    for i, (w, b) in enumerate(mlp.layers, start=1):
        out[f"mlp.l{i}.w"] = w
        out[f"mlp.l{i}.b"] = b
    return out


def radiance_forward(mlp, batch):
    """Latent features for a QueryBatch, differentiable w.r.t. the weights."""
    return mlp.forward(ad.Tensor(batch.coords_encoded), ad.Tensor(batch.dirs_encoded))


def count_params(mlp):
    """(parameter count, serialized float32 bytes)."""
    n = sum(w.data.size + b.data.size for w, b in mlp.layers)
    return n, 4 * n


# ---------------------------------------------------------------------------
# refinement network


class _GatedBlock:
    """feature conv (.) sigmoid(gate conv) -> relu -> instance norm."""

    def __init__(self, rng, c_in, c_out, kernel=3):
        fan_in = c_in * kernel * kernel
        self.feat_w = ad.uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.feat_b = ad.uniform_init(rng, (c_out,), fan_in)
        self.gate_w = ad.uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.gate_b = ad.uniform_init(rng, (c_out,), fan_in)
        self.gamma = ad.Tensor(np.ones(c_out), requires_grad=True)
        self.beta = ad.Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = kernel // 2

    def forward(self, x):
        feat = ad.conv2d(x, self.feat_w, self.feat_b, stride=1, padding=self.padding)
        gate = ad.conv2d(x, self.gate_w, self.gate_b, stride=1, padding=self.padding)
        y = ad.relu(ad.mul(feat, ad.sigmoid(gate)))
        return ad.instance_norm(y, self.gamma, self.beta)

    def params(self, prefix):
        return {
            prefix + ".feat.w": self.feat_w,
            prefix + ".feat.b": self.feat_b,
            prefix + ".gate.w": self.gate_w,
            prefix + ".gate.b": self.gate_b,
            prefix + ".norm.gamma": self.gamma,
            prefix + ".norm.beta": self.beta,
        }


class RefineNet:
    """Encoder-decoder over the scattered feature map; outputs RGB in (0,1)."""

    N_DOWN = 4

    def __init__(self, in_channels=8, width_mult=0.25, seed=0):
        if width_mult <= 0:
            raise ValidationError(f"width_mult must be positive, got {width_mult}")
        self.in_channels = int(in_channels)
        self.width_mult = float(width_mult)
        widths = [max(1, int(round(w * width_mult))) for w in REFINE_WIDTHS]
        self.widths = widths
        rng = np.random.default_rng(seed)
        self.enc = []
        c_prev = self.in_channels
        for c in widths:
            self.enc.append(_GatedBlock(rng, c_prev, c))
            c_prev = c
        self.dec = []
        for level in range(self.N_DOWN - 1, -1, -1):
            c_in = widths[level + 1] + widths[level]
            self.dec.append(_GatedBlock(rng, c_in, widths[level]))
        fan_in = widths[0] * 9
        self.out_w = ad.uniform_init(rng, (3, widths[0], 3, 3), fan_in)
        self.out_b = ad.uniform_init(rng, (3,), fan_in)

    def _forward_chw(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            if i > 0:
                x = ad.downsample2(x)
            x = block.forward(x)
            skips.append(x)
        y = skips[-1]
        for i, block in enumerate(self.dec):
            skip = skips[self.N_DOWN - 1 - i]
            y = block.forward(ad.concat(ad.upsample2(y), skip, axis=0))
        return ad.sigmoid(ad.conv2d(y, self.out_w, self.out_b, stride=1, padding=1))

    def forward(self, fmap):
        """fmap: (H, W, C_in) tensor with H and W divisible by 16."""
        h, w, c = fmap.data.shape
        if c != self.in_channels:
            raise ShapeError(f"feature map has {c} channels, expected {self.in_channels}")
        if h % 16 or w % 16:
            raise ShapeError(
                f"extents {h}x{w} not divisible by 16; pad the input "
                f"(refine_forward_padded does this) before calling forward"
            )
        x = ad.permute(fmap, (2, 0, 1))
        return ad.permute(self._forward_chw(x), (1, 2, 0))


def refine_params(net):
    out = {}
    for i, block in enumerate(net.enc):
        out.update(block.params(f"refine.enc{i}"))
    for i, block in enumerate(net.dec):
        level = net.N_DOWN - 1 - i
        out.update(block.params(f"refine.dec{level}"))
    out["refine.out.w"] = net.out_w
    out["refine.out.b"] = net.out_b
    return out


def refine_forward(net, fmap):
    """(H, W, C_in) feature map to (H, W, 3) image in (0, 1)."""
    return net.forward(fmap)


def refine_forward_padded(net, fmap):
    """refine_forward with reflect padding to multiples of 16 and cropping."""
    h, w, _ = fmap.data.shape
    ph = (-h) % 16
    pw = (-w) % 16
    if ph == 0 and pw == 0:
        return net.forward(fmap)
    x = ad.permute(fmap, (2, 0, 1))
    x = ad.pad_reflect2d(x, 0, ph, 0, pw)
    out = net._forward_chw(x)
    out = ad.crop2d(out, 0, 0, h, w)
    return ad.permute(out, (1, 2, 0))


def scatter_features(features, pixel_ids, height, width):
    """Rows to a (H, W, C) map; unoccupied pixels stay exactly zero."""
    flat = ad.scatter_rows(features, pixel_ids, height * width)
    return ad.reshape(flat, (height, width, features.data.shape[1]))


def set_params(params, loaded, strict=True):
    """Copy checkpoint arrays into live parameters, validating shapes."""
    for name, tensor in params.items():
        if name not in loaded:
            if strict:
                raise FormatError(f"checkpoint lacks tensor {name!r}")
            continue
        arr = np.asarray(loaded[name], dtype=np.float64)
        if arr.shape != tensor.data.shape:
            raise FormatError(
                f"checkpoint tensor {name!r} has shape {arr.shape}, "
                f"model expects {tensor.data.shape}"
            )
        tensor.data[...] = arr


# ---------------------------------------------------------------------------
# volume rendering oracle


@dataclass
class VolumeSamples:
    """Densities and colors at strictly increasing depths along one ray."""

    ts: np.ndarray
    sigmas: np.ndarray
    colors: np.ndarray
    t_near: float = 0.0
    t_far: float = 1.0

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        n = self.ts.shape[0]
        if self.sigmas.shape != (n,) or self.colors.shape != (n, 3):
            raise ValidationError(
                f"lengths disagree: ts {self.ts.shape}, sigmas "
                f"{self.sigmas.shape}, colors {self.colors.shape}"
            )
        if n and not (np.diff(self.ts) > 0).all():
            raise ValidationError("sample depths must be strictly increasing")
        if n and (self.ts[0] < self.t_near or self.ts[-1] > self.t_far):
            raise ValidationError("sample depths must lie in [t_near, t_far]")
        if (self.sigmas < 0).any():
            raise ValidationError("densities must be non-negative")


def volume_render_oracle(samples, last_delta=None):
    """Discrete transmittance quadrature of the ray color.

    delta_i = t_{i+1} - t_i with the final interval defaulting to
    t_far - t_near; alpha_i = 1 - exp(-sigma_i * delta_i);
    T_i = prod_{j<i} (1 - alpha_j); returns sum_i T_i * alpha_i * c_i.
    """
    n = samples.ts.shape[0]
    if n == 0:
        return np.zeros(3)
    if last_delta is None:
        last_delta = samples.t_far - samples.t_near
    deltas = np.empty(n)
    deltas[:-1] = np.diff(samples.ts)
    deltas[-1] = last_delta
    alphas = 1.0 - np.exp(-samples.sigmas * deltas)
    trans = np.cumprod(np.concatenate([[1.0], 1.0 - alphas[:-1]]))
    weights = trans * alphas
    return (weights[:, None] * samples.colors).sum(axis=0)
