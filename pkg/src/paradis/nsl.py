"""Neural semi-Lagrangian transport: differentiable departure-point
resampling on the sphere, the latent advection layer, and the 20-parameter
single-tracer variant used by the capacity benchmark.

Interpolation uses the 4x4 Lagrange cubic stencil, which reproduces cubic
polynomials exactly along each axis; a 2x2 bilinear mode is kept for the
diffusion-artifact comparison.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_op
from .blocks import ChannelMixer, ChannelNorm, LowRankBias, Module, fan_in_uniform
from .sphere import departure_points, geocyclic_pad, pole_average


def _cubic_weights(t):
    """Lagrange cubic weights and derivatives at offsets (-1, 0, 1, 2)."""
    w = (
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t * t - 1.0) * (t - 2.0) / 2.0,
        -t * (t + 1.0) * (t - 2.0) / 2.0,
        t * (t * t - 1.0) / 6.0,
    )
    dw = (
        -(3.0 * t * t - 6.0 * t + 2.0) / 6.0,
        (3.0 * t * t - 4.0 * t - 1.0) / 2.0,
        -(3.0 * t * t - 2.0 * t - 2.0) / 2.0,
        (3.0 * t * t - 1.0) / 6.0,
    )
    return w, dw


def _linear_weights(t):
    return (1.0 - t, t), (-np.ones_like(t), np.ones_like(t))


def resample(padded, rows, cols, halo, order="bicubic"):
    """Sample ``padded[C, H+2*halo, W+2*halo]`` at fractional grid positions.

    ``rows``/``cols`` index the unpadded grid and may be shared [H,W] or
    per-channel [C,H,W]; both the field values and the coordinates receive
    exact gradients.
    """
    if order == "bicubic":
        offsets, weight_fn, need = range(-1, 3), _cubic_weights, 2
    elif order == "bilinear":
        offsets, weight_fn, need = range(0, 2), _linear_weights, 1
    else:
        raise ValueError(f"unknown interpolation order '{order}'")
    if halo < need:
        raise ValueError(f"{order} needs a halo of at least {need}")

    c = padded.shape[0]
    hp, wp = padded.shape[1], padded.shape[2]
    per_channel = rows.ndim == 3
    if per_channel and rows.shape[0] != c:
        raise ad.ShapeError("per-channel coordinates must match channel count")

    r, s = rows.data, cols.data
    i0 = np.floor(r).astype(np.int64)
    j0 = np.floor(s).astype(np.int64)
    ft, fs = r - i0, s - j0
    lo = offsets[0]
    hi = offsets[-1]
    if (i0 + lo + halo < 0).any() or (i0 + hi + halo > hp - 1).any() \
            or (j0 + lo + halo < 0).any() or (j0 + hi + halo > wp - 1).any():
        raise ValueError("departure coordinates fall outside the padded domain")

    wy, dwy = weight_fn(ft)
    wx, dwx = weight_fn(fs)
    flat = padded.data.reshape(c, -1)
    base_i = i0 + halo
    base_j = j0 + halo

    gathered = {}
    out = 0.0
    for a, off_i in enumerate(offsets):
        for b, off_j in enumerate(offsets):
            idx = (base_i + off_i) * wp + (base_j + off_j)
            if per_channel:
                vals = np.take_along_axis(flat, idx.reshape(c, -1), axis=1)
                vals = vals.reshape(r.shape)
            else:
                vals = flat[:, idx.reshape(-1)].reshape((c,) + r.shape)
            gathered[(a, b)] = (idx, vals)
            out = out + wy[a] * wx[b] * vals

    def back(g):
        size = c * hp * wp
        gp = np.zeros(size)
        gr = np.zeros(r.shape)
        gs = np.zeros(s.shape)
        chan_off = np.arange(c)[:, None, None] * (hp * wp)
        for a, _ in enumerate(offsets):
            for b, _ in enumerate(offsets):
                idx, vals = gathered[(a, b)]
                comb = (idx if per_channel else idx[None]) + chan_off
                gw = g * (wy[a] * wx[b])
                gp += np.bincount(comb.ravel(), weights=np.broadcast_to(
                    gw, (c,) + idx.shape[-2:]).ravel(), minlength=size)
                contrib = g * vals
                if per_channel:
                    gr += dwy[a] * wx[b] * contrib
                    gs += wy[a] * dwx[b] * contrib
                else:
                    gr += (dwy[a] * wx[b] * contrib).sum(axis=0)
                    gs += (wy[a] * dwx[b] * contrib).sum(axis=0)
        return (gp.reshape(padded.shape), gr, gs)

    return make_op(f"resample-{order}", (padded, rows, cols),
                   np.ascontiguousarray(out), back)


def coords_from_angles(phi_d, lambda_d, grid):
    """Fractional row/column positions of departure angles on the grid."""
    inv_dphi = 1.0 / grid.dphi
    inv_dlam = 1.0 / grid.dlambda
    rows = ad.scalar_mul(ad.sub(Tensor(np.full((), math.pi / 2)), phi_d),
                         inv_dphi)
    cols = ad.scalar_mul(lambda_d, inv_dlam)
    return rows, cols


def advect(field, phi_d, lambda_d, grid, order="bicubic"):
    """Transport ``field[C,H,W]`` by sampling at departure angles."""
    halo = 2 if order == "bicubic" else 1
    rows, cols = coords_from_angles(phi_d, lambda_d, grid)
    return resample(geocyclic_pad(field, halo=halo), rows, cols, halo, order)


class VelocityNet(Module):
    """Normalized spatial mixing producing one (u, v) pair per transported
    channel; the final projection starts at zero so the initial model does
    no transport."""

    def __init__(self, c_latent, n_pairs, h, w, rng, bias_channels=4,
                 bias_rank=128):
        self.norm = ChannelNorm(c_latent)
        self.kernel = fan_in_uniform(rng, (c_latent, 3, 3), 9)
        self.mixer = ChannelMixer(c_latent, 2 * n_pairs, rng, bias=True,
                                  zero_init=True)
        self.bias_field = LowRankBias(bias_channels, bias_rank, h, w,
                                      2 * n_pairs, rng)

    def __call__(self, x):
        y = ad.depthwise_conv3x3(geocyclic_pad(self.norm(x), halo=1),
                                 self.kernel)
        return ad.add(self.mixer(y), self.bias_field())


class NSLLayer(Module):
    """Latent semi-Lagrangian step: project down, backtrace, interpolate,
    project up, add residually.

    The pole rows are zonally averaged before and after the interpolation.
    With ``shared_velocity`` a single (u, v) field transports every
    projected channel instead of one pair per channel.
    """

    def __init__(self, c_latent, c_adv, grid, rng, order="bicubic",
                 shared_velocity=False, bias_channels=4, bias_rank=128):
        h, w = grid.shape
        self.grid = grid
        self.c_adv = c_adv
        self.order = order
        self.n_pairs = 1 if shared_velocity else c_adv
        self.velocity_net = VelocityNet(c_latent, self.n_pairs, h, w, rng,
                                        bias_channels, bias_rank)
        self.down = ChannelMixer(c_latent, c_adv, rng, bias=True)
        self.up = ChannelMixer(c_adv, c_latent, rng, bias=True, zero_init=True)

    def transport_velocities(self, h):
        uv = self.velocity_net(h)
        u = ad.narrow(uv, 0, 0, self.n_pairs)
        v = ad.narrow(uv, 0, self.n_pairs, self.n_pairs)
        if self.n_pairs == 1:
            hh, ww = self.grid.shape
            u = ad.reshape(u, (hh, ww))
            v = ad.reshape(v, (hh, ww))
        return u, v

    def __call__(self, h):
        u, v = self.transport_velocities(h)
        phi, lam = self.grid.mesh_rad()
        phi_d, lambda_d = departure_points(phi, lam, u, v)
        z = pole_average(self.down(h))
        z_t = pole_average(advect(z, phi_d, lambda_d, self.grid, self.order))
        return ad.add(h, self.up(ad.sub(z_t, z)))


class ToyAdvector(Module):
    """Single 3x3 convolution (1 -> 2 channels, with bias) whose outputs are
    the local (u, v) displacements; pure transport of the input tracer."""

    def __init__(self, grid, rng, order="bicubic"):
        self.grid = grid
        self.order = order
        # zero start: no transport, and safely inside the displacement bound
        self.weight = ad.parameter(np.zeros((2, 1, 3, 3)))
        self.bias = ad.parameter(np.zeros(2))

    def __call__(self, tracer):
        uv = ad.conv3x3(geocyclic_pad(tracer, halo=1), self.weight, self.bias)
        hh, ww = self.grid.shape
        u = ad.reshape(ad.narrow(uv, 0, 0, 1), (hh, ww))
        v = ad.reshape(ad.narrow(uv, 0, 1, 1), (hh, ww))
        phi, lam = self.grid.mesh_rad()
        phi_d, lambda_d = departure_points(phi, lam, u, v)
        return advect(tracer, phi_d, lambda_d, self.grid, self.order)
