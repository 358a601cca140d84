"""Spherical geometry services for an equiangular latitude-longitude grid.

Grid orientation convention used everywhere in this package: row 0 is the
North Pole (+90 deg) and latitudes decrease monotonically to -90 deg at the
last row; longitudes ascend from 0 deg with uniform spacing and wrap at 360.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_op

EARTH_RADIUS_KM = 6371.0


@dataclass(frozen=True)
class LatLonGrid:
    """Equiangular lat-lon grid descriptor, poles included when H spans them."""

    n_lat: int
    n_lon: int
    lat_deg: np.ndarray = field(repr=False)
    lon_deg: np.ndarray = field(repr=False)

    def __post_init__(self):
        lat = np.asarray(self.lat_deg, dtype=np.float64)
        lon = np.asarray(self.lon_deg, dtype=np.float64)
        if lat.shape != (self.n_lat,) or lon.shape != (self.n_lon,):
            raise ValueError("lat/lon arrays inconsistent with grid dims")
        if not np.all(np.diff(lat) < 0):
            raise ValueError("latitudes must be strictly decreasing from north")
        dlon = np.diff(lon)
        if not (np.all(dlon > 0) and np.allclose(dlon, dlon[0], atol=1e-12)):
            raise ValueError("longitudes must ascend with uniform spacing")
        if abs(self.n_lon * math.radians(dlon[0]) - 2 * math.pi) > 1e-12:
            raise ValueError("longitude spacing must tile the full circle")
        object.__setattr__(self, "lat_deg", lat)
        object.__setattr__(self, "lon_deg", lon)

    @classmethod
    def global_grid(cls, n_lat, n_lon):
        """Pole-to-pole grid with rows at 90, 90-dphi, ..., -90 degrees."""
        if n_lat < 3:
            raise ValueError("need at least 3 latitude rows")
        lat = np.linspace(90.0, -90.0, n_lat)
        lon = np.arange(n_lon) * (360.0 / n_lon)
        return cls(n_lat, n_lon, lat, lon)

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)

    @property
    def dphi(self):
        """Latitude spacing in radians (positive)."""
        return math.radians(self.lat_deg[0] - self.lat_deg[1])

    @property
    def dlambda(self):
        """Longitude spacing in radians."""
        return math.radians(self.lon_deg[1] - self.lon_deg[0])

    @property
    def lat_rad(self):
        return np.radians(self.lat_deg)

    @property
    def lon_rad(self):
        return np.radians(self.lon_deg)

    def mesh_rad(self):
        """(phi, lambda) meshes in radians, each of shape (n_lat, n_lon)."""
        return np.meshgrid(self.lat_rad, self.lon_rad, indexing="ij")

    def has_pole_rows(self):
        return (abs(self.lat_deg[0] - 90.0) < 1e-9
                and abs(self.lat_deg[-1] + 90.0) < 1e-9)


@dataclass(frozen=True)
class QuadratureWeights:
    """Per-row latitude weights; unit mean across rows when normalized."""

    w_lat: np.ndarray
    normalized: bool

    def __post_init__(self):
        if np.any(self.w_lat <= 0):
            raise ValueError("latitude weights must be positive")


def latitude_weights(grid, normalize=True):
    """Area weights per latitude row.

    Pole rows (|phi| = 90 deg) weigh sin^2(dphi/4), the exact polar cap area
    factor; interior rows weigh cos(phi) * sin(dphi/2), the exact band area
    factor. Normalization divides by the mean so the weights average to 1.
    """
    phi = grid.lat_rad
    half = 0.5 * grid.dphi
    w = np.cos(phi) * math.sin(half)
    pole = np.abs(np.abs(grid.lat_deg) - 90.0) < 1e-9
    w[pole] = math.sin(half / 2.0) ** 2
    if normalize:
        w = w / w.mean()
    return QuadratureWeights(w_lat=w, normalized=normalize)


def cell_solid_angles(grid):
    """Solid angle of each grid cell, shape (n_lat,); sums to 4*pi over rows
    times n_lon."""
    w = latitude_weights(grid, normalize=True).w_lat
    return w * (4.0 * math.pi) / (grid.n_lat * grid.n_lon)


# ---------------------------------------------------------------------------
# geocyclic padding and pole constraint


def geocyclic_pad(x, halo=1):
    """Sphere-aware halo for ``x[C,H,W]``.

    Longitude wraps periodically; rows beyond a pole are the mirror rows on
    the far side, i.e. row -k maps to row k rolled by half the longitudes
    (and symmetrically at the south pole). Corners compose both rules.
    """
    if x.ndim != 3:
        raise ad.ShapeError(f"geocyclic_pad expects [C,H,W], got {x.shape}")
    c, h, w = x.shape
    if w % 2:
        raise ad.ShapeError("geocyclic_pad requires an even longitude count")
    if halo < 1 or halo >= h:
        raise ValueError("halo must be in [1, H)")
    half = w // 2

    def _forward(arr):
        ext = np.empty((c, h + 2 * halo, w), dtype=arr.dtype)
        ext[:, halo:halo + h, :] = arr
        for k in range(1, halo + 1):
            ext[:, halo - k, :] = np.roll(arr[:, k, :], half, axis=-1)
            ext[:, halo + h - 1 + k, :] = np.roll(arr[:, h - 1 - k, :], half, axis=-1)
        return np.concatenate(
            [ext[:, :, w - halo:], ext, ext[:, :, :halo]], axis=2)

    def back(g):
        gext = g[:, :, halo:halo + w].copy()
        gext[:, :, w - halo:] += g[:, :, :halo]
        gext[:, :, :halo] += g[:, :, halo + w:]
        gx = gext[:, halo:halo + h, :].copy()
        for k in range(1, halo + 1):
            gx[:, k, :] += np.roll(gext[:, halo - k, :], -half, axis=-1)
            gx[:, h - 1 - k, :] += np.roll(gext[:, halo + h - 1 + k, :], -half,
                                           axis=-1)
        return (gx,)

    return make_op("geocyclic-pad", (x,), _forward(x.data), back)


def pole_average(x):
    """Replace the two pole rows of ``x[C,H,W]`` by their zonal mean."""
    if x.ndim != 3:
        raise ad.ShapeError(f"pole_average expects [C,H,W], got {x.shape}")
    w = x.shape[2]
    out = x.data.copy()
    out[:, 0, :] = out[:, 0, :].mean(axis=-1, keepdims=True)
    out[:, -1, :] = out[:, -1, :].mean(axis=-1, keepdims=True)

    def back(g):
        gx = g.copy()
        gx[:, 0, :] = g[:, 0, :].sum(axis=-1, keepdims=True) / w
        gx[:, -1, :] = g[:, -1, :].sum(axis=-1, keepdims=True) / w
        return (gx,)

    return make_op("pole-average", (x,), out, back)


# ---------------------------------------------------------------------------
# backward trajectories on the sphere

MAX_DISPLACEMENT = math.pi / 2.0


def departure_points(phi_a, lambda_a, u, v):
    """Departure coordinates for arrival points under angular displacements.

    ``u`` and ``v`` are eastward/northward angular displacements per step in
    radians (the time step is absorbed into them). The backtrace works in a
    coordinate system rotated so the arrival point sits on its equator:
    lambda' = -u measures distance along that rotated equator and phi' = -v
    perpendicular to it, which keeps trajectories well defined at the poles.

    Accepts numpy arrays or Tensors; differentiable w.r.t. ``u`` and ``v``.
    Returns (phi_d, lambda_d) with phi_d in [-pi/2, pi/2] and lambda_d
    wrapped into [0, 2*pi).
    """
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    max_disp = max(np.max(np.abs(u.data), initial=0.0),
                   np.max(np.abs(v.data), initial=0.0))
    if max_disp >= MAX_DISPLACEMENT:
        raise ValueError(
            f"displacement bound violated: max |u|,|v| = {max_disp:.6f} rad "
            f"exceeds {MAX_DISPLACEMENT:.6f}")
    phi_a = phi_a if isinstance(phi_a, Tensor) else Tensor(phi_a)
    lambda_a = lambda_a if isinstance(lambda_a, Tensor) else Tensor(lambda_a)

    phi_p = ad.neg(v)
    lam_p = ad.neg(u)
    sin_pp, cos_pp = ad.sin(phi_p), ad.cos(phi_p)
    sin_lp, cos_lp = ad.sin(lam_p), ad.cos(lam_p)
    sin_pa = Tensor(np.sin(phi_a.data))
    cos_pa = Tensor(np.cos(phi_a.data))

    arg = ad.add(ad.mul(sin_pp, cos_pa), ad.mul(ad.mul(cos_pp, cos_lp), sin_pa))
    phi_d = ad.arcsin(ad.clip(arg, -1.0, 1.0))
    num = ad.mul(cos_pp, sin_lp)
    den = ad.sub(ad.mul(ad.mul(cos_pp, cos_lp), cos_pa), ad.mul(sin_pp, sin_pa))
    lambda_d = ad.mod_2pi(ad.add(lambda_a, ad.atan2(num, den)))
    return phi_d, lambda_d


# ---------------------------------------------------------------------------
# wind coordinate transforms (pre/post-processing, plain numpy)


def wind_sph_to_cart(u, v, w, phi, lam):
    """Spherical wind components (east, north, up) to Cartesian (x, y, z)."""
    sphi, cphi = np.sin(phi), np.cos(phi)
    slam, clam = np.sin(lam), np.cos(lam)
    ux = -u * slam - v * sphi * clam - w * cphi * clam
    uy = u * clam - v * sphi * slam - w * cphi * slam
    uz = v * cphi - w * sphi
    return ux, uy, uz


def wind_cart_to_sph(ux, uy, uz, phi, lam):
    """Inverse of :func:`wind_sph_to_cart`."""
    sphi, cphi = np.sin(phi), np.cos(phi)
    slam, clam = np.sin(lam), np.cos(lam)
    u = -ux * slam + uy * clam
    v = -ux * sphi * clam - uy * sphi * slam + uz * cphi
    w = -ux * cphi * clam - uy * cphi * slam - uz * sphi
    return u, v, w


# ---------------------------------------------------------------------------
# great-circle helpers


def haversine_km(lat1, lon1, lat2, lon2, radius_km=EARTH_RADIUS_KM):
    """Great-circle distance between points given in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2, dtype=np.float64) - lon1)
    a = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2
    return 2.0 * radius_km * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def great_circle_destination(lat_deg, lon_deg, bearing_deg, distance_rad):
    """Destination after travelling ``distance_rad`` along the great circle
    leaving (lat, lon) with the given initial bearing (0 = north, 90 = east).
    """
    phi = math.radians(lat_deg)
    lam = math.radians(lon_deg)
    brg = math.radians(bearing_deg)
    d = distance_rad
    phi2 = math.asin(math.sin(phi) * math.cos(d)
                     + math.cos(phi) * math.sin(d) * math.cos(brg))
    lam2 = lam + math.atan2(math.sin(brg) * math.sin(d) * math.cos(phi),
                            math.cos(d) - math.sin(phi) * math.sin(phi2))
    return math.degrees(phi2), math.degrees(lam2) % 360.0


def angular_distance_rad(lat1, lon1, lat2, lon2):
    """Central angle between two points given in degrees."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dlam = np.radians(np.asarray(lon2, dtype=np.float64) - lon1)
    a = (np.sin((p2 - p1) / 2) ** 2
         + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2) ** 2)
    return 2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
