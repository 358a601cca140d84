"""Elementary learned operators: channel/spatial mixers, low-rank bias
fields, channel normalization, the diffusion and reaction residual blocks,
the linear encoder/decoder pair, and a U-Net baseline for the advection
capacity comparison.

Initialization policy: residual branches end in a zero-initialized linear
map so every block starts as the exact identity; low-rank bias fields start
at zero through their per-channel coefficient factor; everything else is
fan-in-scaled uniform.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sphere import geocyclic_pad


def fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Minimal parameter container; children discovered by attribute walk."""

    def parameters(self):
        """Hierarchically named learned tensors, in attribute order."""
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                for sub, t in val.parameters().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for sub, t in item.parameters().items():
                            out[f"{name}.{i}.{sub}"] = t
        return out

    def parameter_count(self):
        return sum(t.data.size for t in self.parameters().values())

    def zero_grad(self):
        for t in self.parameters().values():
            t.zero_grad()


class ChannelMixer(Module):
    """Pointwise linear map across channels: out = W h (+ b)."""

    def __init__(self, c_in, c_out, rng, bias=True, zero_init=False):
        self.c_in, self.c_out = c_in, c_out
        if zero_init:
            self.weight = ad.parameter(np.zeros((c_out, c_in)))
        else:
            self.weight = fan_in_uniform(rng, (c_out, c_in), c_in)
        self.bias = ad.parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x):
        return ad.conv1x1(x, self.weight, self.bias)


class SpatialMixer(Module):
    """Depthwise 3x3 stencil followed by a pointwise projection.

    Geocyclic padding is applied internally, so inputs live on the raw grid.
    """

    def __init__(self, c_in, c_out, rng, zero_init_pointwise=False):
        self.c_in, self.c_out = c_in, c_out
        self.kernel = fan_in_uniform(rng, (c_in, 3, 3), 9)
        self.pointwise = ChannelMixer(c_in, c_out, rng, bias=True,
                                      zero_init=zero_init_pointwise)

    def __call__(self, x):
        if x.shape[1] < 4 or x.shape[2] < 4:
            raise ValueError(f"grid {x.shape[1:]} too small for a 3x3 stencil")
        y = ad.depthwise_conv3x3(geocyclic_pad(x, halo=1), self.kernel)
        return self.pointwise(y)


class LowRankBias(Module):
    """Global bias field from a rank-K separable factorization.

    B'[c,i,j] = sum_k A[c,k] U[k,i] V[k,j]; B = W_hat B'. The per-channel
    coefficients A start at zero (so B = 0) while U, V stay random; a fully
    zeroed factorization would have zero gradient everywhere.
    """

    def __init__(self, c_bias, rank, h, w, c_out, rng):
        self.shape_out = (c_out, h, w)
        self.coeff = ad.parameter(np.zeros((c_bias, rank)))
        self.lat_factors = fan_in_uniform(rng, (rank, h), rank)
        self.lon_factors = fan_in_uniform(rng, (rank, w), rank)
        self.project = ChannelMixer(c_bias, c_out, rng, bias=False)

    def __call__(self):
        inner = low_rank_field(self.coeff, self.lat_factors, self.lon_factors)
        return self.project(inner)


def low_rank_field(a, u, v):
    """Reconstruct ``B'[c,i,j] = sum_k a[c,k] u[k,i] v[k,j]`` on the tape."""
    out = np.einsum("ck,ki,kj->cij", a.data, u.data, v.data)

    def back(g):
        return (
            np.einsum("cij,ki,kj->ck", g, u.data, v.data),
            np.einsum("cij,ck,kj->ki", g, a.data, v.data),
            np.einsum("cij,ck,ki->kj", g, a.data, u.data),
        )

    return ad.make_op("low-rank-field", (a, u, v), out, back)


class ChannelNorm(Module):
    """Per-location normalization across the channel axis with affine."""

    def __init__(self, c, eps=1e-8):
        self.c = c
        self.eps = eps
        self.gamma = ad.parameter(np.ones((c, 1, 1)))
        self.beta = ad.parameter(np.zeros((c, 1, 1)))

    def __call__(self, x):
        mu = ad.tmean(x, axis=0, keepdims=True)
        centered = ad.sub(x, ad.expand(mu, x.shape))
        var = ad.tmean(ad.square(centered), axis=0, keepdims=True)
        scale = ad.sqrt(ad.add(var, Tensor(np.full((), self.eps))))
        xhat = ad.div(centered, ad.expand(scale, x.shape))
        return ad.add(ad.mul(ad.expand(self.gamma, x.shape), xhat),
                      ad.expand(self.beta, x.shape))


class DiffusionBlock(Module):
    """Residual spatial mixing: h + [mix(depthwise(norm(h))) + bias field]."""

    def __init__(self, c, h, w, rng, bias_channels=4, bias_rank=128):
        self.norm = ChannelNorm(c)
        self.kernel = fan_in_uniform(rng, (c, 3, 3), 9)
        self.mixer = ChannelMixer(c, c, rng, bias=True, zero_init=True)
        self.bias_field = LowRankBias(bias_channels, bias_rank, h, w, c, rng)

    def __call__(self, x):
        y = ad.depthwise_conv3x3(geocyclic_pad(self.norm(x), halo=1),
                                 self.kernel)
        return ad.add(x, ad.add(self.mixer(y), self.bias_field()))


class ReactionBlock(Module):
    """Residual pointwise mixing, strictly local:
    h + W2 silu(W1 norm(h) + b1 + bias field) + b2."""

    def __init__(self, c, h, w, rng, c_hidden=None, bias_channels=4,
                 bias_rank=128):
        c_hidden = c if c_hidden is None else c_hidden
        self.norm = ChannelNorm(c)
        self.lift = ChannelMixer(c, c_hidden, rng, bias=True)
        self.bias_field = LowRankBias(bias_channels, bias_rank, h, w,
                                      c_hidden, rng)
        self.drop = ChannelMixer(c_hidden, c, rng, bias=True, zero_init=True)

    def __call__(self, x):
        z = ad.add(self.lift(self.norm(x)), self.bias_field())
        return ad.add(x, self.drop(ad.silu(z)))


class Encoder(Module):
    """Linear lift of the assembled input channels; no bias, no activation."""

    def __init__(self, c_in, c_latent, rng):
        self.weight = fan_in_uniform(rng, (c_latent, c_in), c_in)

    def __call__(self, x):
        return ad.conv1x1(x, self.weight)


class Decoder(Module):
    """Spatial mixing plus bias field, then a zero-initialized linear read-out."""

    def __init__(self, c_latent, c_out, h, w, rng, bias_channels=4,
                 bias_rank=128):
        self.spatial = SpatialMixer(c_latent, c_latent, rng)
        self.bias_field = LowRankBias(bias_channels, bias_rank, h, w,
                                      c_latent, rng)
        self.readout = ChannelMixer(c_latent, c_out, rng, bias=True,
                                    zero_init=True)

    def __call__(self, x):
        return self.readout(ad.add(self.spatial(x), self.bias_field()))


class ConvBlock(Module):
    """U-Net level: entry 3x3 conv (possibly changing width) then
    residual 3x3 convs; SiLU activations; geocyclic padding throughout."""

    def __init__(self, c_in, c_out, n_convs, rng):
        self.entry_w = fan_in_uniform(rng, (c_out, c_in, 3, 3), 9 * c_in)
        self.entry_b = ad.parameter(np.zeros(c_out))
        self.inner = []
        for _ in range(max(0, n_convs - 1)):
            w = fan_in_uniform(rng, (c_out, c_out, 3, 3), 9 * c_out)
            b = ad.parameter(np.zeros(c_out))
            self.inner.append((w, b))

    def parameters(self):
        out = {"entry_w": self.entry_w, "entry_b": self.entry_b}
        for i, (w, b) in enumerate(self.inner):
            out[f"inner.{i}.w"] = w
            out[f"inner.{i}.b"] = b
        return out

    def __call__(self, x):
        y = ad.silu(ad.conv3x3(geocyclic_pad(x, halo=1), self.entry_w,
                               self.entry_b))
        for w, b in self.inner:
            z = ad.silu(ad.conv3x3(geocyclic_pad(y, halo=1), w, b))
            y = ad.add(y, z)
        return y


class UNet(Module):
    """Encoder-decoder convolutional baseline with pooling and skip
    concatenation; channels double per depth level."""

    # (top-level channels, convs per block), chosen to land near the
    # published single-channel baselines while keeping the receptive field
    # of the deepest variant inside the benchmark's angular sweep
    PRESETS = {1: (16, 3), 2: (8, 3), 3: (4, 2)}

    def __init__(self, depth, rng, top_channels=None, convs_per_block=None):
        if depth not in (1, 2, 3):
            raise ValueError("depth must be 1, 2 or 3")
        preset_c, preset_n = self.PRESETS[depth]
        c0 = preset_c if top_channels is None else top_channels
        n = preset_n if convs_per_block is None else convs_per_block
        self.depth = depth
        self.in_proj = ChannelMixer(1, c0, rng, bias=True)
        self.enc = [ConvBlock(c0 if i == 0 else c0 * 2 ** (i - 1),
                              c0 * 2 ** i, n, rng)
                    for i in range(depth)]
        self.bottom = ConvBlock(c0 * 2 ** (depth - 1), c0 * 2 ** depth, n, rng)
        self.dec = [ConvBlock(c0 * 2 ** (i + 1) + c0 * 2 ** i, c0 * 2 ** i,
                              n, rng)
                    for i in reversed(range(depth))]
        self.out_proj = ChannelMixer(c0, 1, rng, bias=True, zero_init=True)

    def receptive_radius(self):
        """Theoretical dependency radius in grid cells."""
        n = 1 + len(self.enc[0].inner)
        r = sum(n * 2 ** i for i in range(self.depth)) * 2
        return r + n * 2 ** self.depth

    def __call__(self, x):
        h, w = x.shape[1:]
        f = 2 ** self.depth
        pad_h, pad_w = (-h) % f, (-w) % f
        y = ad.pad_edge(x, 0, pad_h, 0, pad_w) if pad_h or pad_w else x
        y = self.in_proj(y)
        skips = []
        for block in self.enc:
            y = block(y)
            skips.append(y)
            y = ad.avg_pool2(y)
        y = self.bottom(y)
        for block, skip in zip(self.dec, reversed(skips)):
            y = block(ad.concat([ad.upsample2(y), skip], axis=0))
        y = self.out_proj(y)
        if pad_h or pad_w:
            y = ad.narrow(ad.narrow(y, 1, 0, h), 2, 0, w)
        return y
