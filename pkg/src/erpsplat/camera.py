"""Equirectangular (ERP) camera model.

Converts between camera-frame directions, (longitude, latitude) angles and
pixel coordinates, and provides the analytic projection Jacobian, per-pixel
solid-angle weights, and tangent-plane neighbor selection.

Conventions:
  - Camera axes: x right, y down, z forward (z points at the image center).
  - lon = atan2(x, z) in [-pi, pi); lat = asin(y / ||mu||) in [-pi/2, pi/2].
  - u = (W / 2pi) * (lon + pi), v = (H / 2pi) * (2 lat + pi); lat = -pi/2
    maps to v = 0 (top row).
  - Integer pixel (u, v) has its continuous center at (u + 0.5, v + 0.5);
    angular pixel bounds for solid angles use the integer edges.
  - The image is periodic in longitude: pixel-space horizontal offsets wrap
    modulo W; vertical lookups clamp.

All functions accept array-likes (lists, numpy arrays, torch tensors) with
arbitrary leading batch dimensions and return float64 torch tensors. They are
pure and differentiable, so they can sit inside an autograd graph.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import torch

TWO_PI = 2.0 * math.pi
POLE_EPS = 1e-8  # directions with x^2 + z^2 <= POLE_EPS^2 are degenerate


class PoleDegenerateError(ValueError):
    """Raised when a direction is too close to a pole for a well-defined
    pixel-space Jacobian or tangent-plane neighborhood."""


@dataclass(frozen=True)
class ErpImageGeom:
    """Dimensions of an ERP image.

    width and height must be even and at least 4 / 2 respectively. The usual
    convention is height = width / 2 but it is not required.
    """

    width: int
    height: int

    def __post_init__(self):
        if self.width < 4 or self.width % 2 != 0:
            raise ValueError(f"width must be even and >= 4, got {self.width}")
        if self.height < 2 or self.height % 2 != 0:
            raise ValueError(f"height must be even and >= 2, got {self.height}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class LatLon:
    """Angular coordinates on the sphere, possibly batched.

    lon in [-pi, pi), lat in [-pi/2, pi/2]; both are float64 tensors of the
    same shape.
    """

    lon: torch.Tensor
    lat: torch.Tensor


def _as_f64(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def project_dir(mu_cam) -> LatLon:
    """Project camera-frame positions onto (lon, lat) angles.

    Args:
        mu_cam: (..., 3) nonzero positions in the camera frame.

    Returns:
        LatLon with lon = atan2(x, z) and lat = asin(y / ||mu_cam||).

    Raises:
        ValueError: if any input has zero norm.

    Scale invariant: project_dir(k * mu) == project_dir(mu) for k > 0. At the
    exact poles (x = z = 0) the longitude follows the atan2(0, 0) = 0
    convention.
    """
    mu = _as_f64(mu_cam)
    norm = torch.linalg.vector_norm(mu, dim=-1)
    if bool((norm == 0).any()):
        raise ValueError("project_dir: zero-norm direction")
    lon = torch.atan2(mu[..., 0], mu[..., 2])
    lat = torch.asin(torch.clamp(mu[..., 1] / norm, -1.0, 1.0))
    return LatLon(lon=lon, lat=lat)


def latlon_to_pixel(a: LatLon, geom: ErpImageGeom) -> tuple[torch.Tensor, torch.Tensor]:
    """Map (lon, lat) to continuous pixel coordinates (u, v).

    u spans [0, W) over lon in [-pi, pi); v spans [0, H] with lat = -pi/2 at
    the top row edge (v = 0) and lat = +pi/2 at v = H.
    """
    u = (geom.width / TWO_PI) * (a.lon + math.pi)
    v = (geom.height / TWO_PI) * (2.0 * a.lat + math.pi)
    return u, v


def pixel_to_ray(u, v, geom: ErpImageGeom) -> torch.Tensor:
    """Unit camera-frame ray through the continuous pixel coordinate (u, v).

    The exact inverse of latlon_to_pixel . project_dir: u wraps modulo W,
    v is interpreted on [0, H]. Returns (..., 3) unit vectors
    (cos(lat) sin(lon), sin(lat), cos(lat) cos(lon)).
    """
    u = _as_f64(u)
    v = _as_f64(v)
    lon = u * (TWO_PI / geom.width) - math.pi
    lat = v * (math.pi / geom.height) - math.pi / 2.0
    cos_lat = torch.cos(lat)
    return torch.stack(
        (cos_lat * torch.sin(lon), torch.sin(lat), cos_lat * torch.cos(lon)), dim=-1
    )


def erp_jacobian(mu_cam, geom: ErpImageGeom) -> torch.Tensor:
    """Analytic Jacobian d(u, v)/d(x, y, z) of the ERP projection.

    Args:
        mu_cam: (..., 3) camera-frame positions, away from the poles.

    Returns:
        (..., 2, 3) matrices in pixel units per camera-frame unit:
            row u: (W/2pi) * ( z/(x^2+z^2), 0, -x/(x^2+z^2) )
            row v: (H/pi) * ( -xy/(r^2 rho), rho/r^2, -zy/(r^2 rho) )
        with r = ||mu_cam|| and rho = sqrt(x^2 + z^2). Homogeneous of degree
        -1 in mu_cam.

    Raises:
        PoleDegenerateError: if x^2 + z^2 <= POLE_EPS^2 anywhere (the
            horizontal direction is undefined there; callers cull such
            Gaussians).
    """
    mu = _as_f64(mu_cam)
    x, y, z = mu[..., 0], mu[..., 1], mu[..., 2]
    rho_sq = x * x + z * z
    if bool((rho_sq <= POLE_EPS**2).any()):
        raise PoleDegenerateError("erp_jacobian: direction too close to a pole")
    r_sq = rho_sq + y * y
    rho = torch.sqrt(rho_sq)
    ku = geom.width / TWO_PI
    kv = geom.height / math.pi
    zero = torch.zeros_like(x)
    row_u = torch.stack((ku * z / rho_sq, zero, -ku * x / rho_sq), dim=-1)
    row_v = torch.stack(
        (-kv * x * y / (r_sq * rho), kv * rho / r_sq, -kv * z * y / (r_sq * rho)),
        dim=-1,
    )
    return torch.stack((row_u, row_v), dim=-2)


def pixel_solid_angle_weight(u, v, geom: ErpImageGeom) -> torch.Tensor:
    """Solid angle (steradians) subtended by integer pixel (u, v).

    Closed form (phi1 - phi0) * (sin theta1 - sin theta0) over the pixel's
    longitude/latitude bounds at the integer pixel edges. Constant along each
    row, maximal at the equator rows, and the sum over the whole image
    telescopes to exactly 4 pi.
    """
    v = _as_f64(v)
    d_phi = TWO_PI / geom.width
    lat0 = v * (math.pi / geom.height) - math.pi / 2.0
    lat1 = (v + 1.0) * (math.pi / geom.height) - math.pi / 2.0
    w = d_phi * (torch.sin(lat1) - torch.sin(lat0))
    return w * torch.ones_like(_as_f64(u))


@functools.lru_cache(maxsize=8)
def solid_angle_map(geom: ErpImageGeom) -> torch.Tensor:
    """(H, W) map of per-pixel solid-angle weights for geom. Cached."""
    v = torch.arange(geom.height, dtype=torch.float64)
    u = torch.zeros(geom.width, dtype=torch.float64)
    row = pixel_solid_angle_weight(torch.zeros_like(v), v, geom)
    return row[:, None] + u[None, :]


def wrap_lon(lon: torch.Tensor) -> torch.Tensor:
    """Wrap longitudes into [-pi, pi)."""
    return torch.remainder(lon + math.pi, TWO_PI) - math.pi


def tangent_offsets(geom: ErpImageGeom, vstep: str = "paper") -> tuple[float, float]:
    """Tangent-plane step sizes (horizontal, vertical) for neighbor selection.

    vstep selects the vertical step: "paper" uses tan(2 pi / H) as printed in
    the reference construction; "pitch" uses tan(pi / H), the actual vertical
    angular pixel pitch.
    """
    tx = math.tan(TWO_PI / geom.width)
    if vstep == "paper":
        ty = math.tan(TWO_PI / geom.height)
    elif vstep == "pitch":
        ty = math.tan(math.pi / geom.height)
    else:
        raise ValueError(f"vstep must be 'paper' or 'pitch', got {vstep!r}")
    return tx, ty


def _gnomonic_neighbor(
    lon: torch.Tensor, lat: torch.Tensor, t_x: float, t_y: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse gnomonic mapping of a tangent-plane offset (t_x, t_y) placed at
    (lon, lat) back onto the sphere. Returns (lon', lat')."""
    rho = math.hypot(t_x, t_y)
    nu = math.atan(rho)
    sin_nu, cos_nu = math.sin(nu), math.cos(nu)
    sin_lat, cos_lat = torch.sin(lat), torch.cos(lat)
    new_lat = torch.asin(
        torch.clamp(cos_nu * sin_lat + (t_y * sin_nu / rho) * cos_lat, -1.0, 1.0)
    )
    new_lon = lon + torch.atan(
        (t_x * sin_nu) / (rho * cos_lat * cos_nu - t_y * sin_lat * sin_nu)
    )
    return wrap_lon(new_lon), new_lat


def tangent_neighbors(u, v, geom: ErpImageGeom, vstep: str = "paper") -> torch.Tensor:
    """Continuous pixel coordinates of the four tangent-plane neighbors of the
    integer pixel (u, v), ordered (right, left, down, up).

    The neighbors are one tangent-plane step away from the pixel center on the
    local gnomonic plane, mapped back to the sphere and then to pixel
    coordinates (longitude wrapped into [-pi, pi)). At the equator the
    horizontal neighbors sit at exactly +-1 pixel and the vertical ones at
    exactly +-(vstep) pixels; at high latitude the horizontal pixel-space
    distance widens.

    Returns:
        (..., 4, 2) tensor of (u, v) pairs.

    Raises:
        PoleDegenerateError: if (u, v) lies in the top or bottom pixel row,
            where the tangent construction is singular.
    """
    u = _as_f64(u)
    v = _as_f64(v)
    if bool((v < 1).any()) or bool((v > geom.height - 2).any()):
        raise PoleDegenerateError("tangent_neighbors: pixel in a pole row")
    center = pixel_to_ray(u + 0.5, v + 0.5, geom)
    ang = project_dir(center)
    t_x, t_y = tangent_offsets(geom, vstep)
    # (t_x, t_y) offsets: (+1,0) right, (-1,0) left, (0,+1) down (lat grows
    # toward the bottom row), (0,-1) up.
    coords = []
    for ox, oy in ((t_x, 0.0), (-t_x, 0.0), (0.0, t_y), (0.0, -t_y)):
        n_lon, n_lat = _gnomonic_neighbor(ang.lon, ang.lat, ox, oy)
        nu, nv = latlon_to_pixel(LatLon(lon=n_lon, lat=n_lat), geom)
        coords.append(torch.stack((torch.remainder(nu, geom.width), nv), dim=-1))
    return torch.stack(coords, dim=-2)


@functools.lru_cache(maxsize=8)
def tangent_neighbor_grid(geom: ErpImageGeom, vstep: str = "paper") -> torch.Tensor:
    """(H, W, 4, 2) neighbor coordinates for every pixel of geom. Cached.

    Pole rows (v = 0 and v = H - 1) are singular; their entries hold the pixel
    center itself so downstream consumers must mask them out.
    """
    H, W = geom.shape
    uu = torch.arange(W, dtype=torch.float64).expand(H - 2, W)
    vv = torch.arange(1, H - 1, dtype=torch.float64)[:, None].expand(H - 2, W)
    grid = torch.empty((H, W, 4, 2), dtype=torch.float64)
    grid[1 : H - 1] = tangent_neighbors(uu, vv, geom, vstep)
    for v_pole in (0, H - 1):
        centers = torch.stack(
            (
                torch.arange(W, dtype=torch.float64) + 0.5,
                torch.full((W,), v_pole + 0.5, dtype=torch.float64),
            ),
            dim=-1,
        )
        grid[v_pole] = centers[:, None, :].expand(W, 4, 2)
    return grid


@functools.lru_cache(maxsize=8)
def pixel_center_rays(geom: ErpImageGeom) -> torch.Tensor:
    """(H, W, 3) unit rays through every pixel center of geom. Cached."""
    H, W = geom.shape
    u = torch.arange(W, dtype=torch.float64) + 0.5
    v = torch.arange(H, dtype=torch.float64) + 0.5
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    return pixel_to_ray(uu, vv, geom)
