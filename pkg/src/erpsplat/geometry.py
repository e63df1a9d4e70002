"""Depth-to-normal estimation on the sphere and the depth-normal error map.

Normals are recovered from a rendered depth map by back-projecting each
pixel's four tangent-plane neighbors into 3D and crossing the two central
differences. Neighbor positions come from the gnomonic tangent-plane
construction in the camera module, so the stencil stays metrically honest at
all latitudes. Everything is differentiable w.r.t. the depth and normal maps.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import torch

from .camera import ErpImageGeom, pixel_center_rays, pixel_to_ray, tangent_neighbor_grid

EDGE_DECAY = 50.0        # k in exp(-k * |grad I|^2) for the edge-aware weight
POLE_EXCLUDE_ROWS = 2    # rows skipped at each pole for depth normals
CROSS_NORM_MIN = 1e-12

# Rec. 601 luma coefficients
_LUMA = (0.299, 0.587, 0.114)


@dataclass
class NormalMap:
    """Camera-frame normals with a per-pixel validity flag.

    Valid entries are unit vectors pointed toward the camera; invalid pixels
    (pole rows, missing depth, degenerate stencils) hold zeros.
    """

    vectors: torch.Tensor  # (H, W, 3)
    valid: torch.Tensor    # (H, W) bool


def _bilinear_taps(coords: torch.Tensor, geom: ErpImageGeom):
    """Corner indices and weights for bilinear sampling at continuous pixel
    coordinates, wrapping horizontally and clamping vertically.

    coords: (..., 2) of (u, v). Returns (idx (..., 4) long into the flat H*W
    grid, weights (..., 4)).
    """
    H, W = geom.shape
    x = coords[..., 0] - 0.5
    y = coords[..., 1] - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    cx0 = torch.remainder(x0.long(), W)
    cx1 = torch.remainder(x0.long() + 1, W)
    cy0 = torch.clamp(y0.long(), 0, H - 1)
    cy1 = torch.clamp(y0.long() + 1, 0, H - 1)
    idx = torch.stack(
        (cy0 * W + cx0, cy0 * W + cx1, cy1 * W + cx0, cy1 * W + cx1), dim=-1
    )
    w = torch.stack(
        ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy), dim=-1
    )
    return idx, w


def sample_bilinear(grid: torch.Tensor, coords, geom: ErpImageGeom) -> torch.Tensor:
    """Bilinearly sample an (H, W) map at continuous pixel coordinates
    (horizontal wrap, vertical clamp)."""
    coords = torch.as_tensor(coords, dtype=torch.float64)
    idx, w = _bilinear_taps(coords, geom)
    return (grid.reshape(-1)[idx] * w).sum(-1)


def backproject(depth: torch.Tensor, px, geom: ErpImageGeom) -> torch.Tensor:
    """3D camera-frame point for a continuous pixel coordinate: the bilinearly
    sampled depth times the unit ray through the coordinate.

    Depth must be positive at the sampled location; consumers treat pixels
    whose stencil touches non-positive depth as invalid.
    """
    px = torch.as_tensor(px, dtype=torch.float64)
    d = sample_bilinear(torch.as_tensor(depth, dtype=torch.float64), px, geom)
    return d[..., None] * pixel_to_ray(px[..., 0], px[..., 1], geom)


@functools.lru_cache(maxsize=8)
def _neighbor_sampling(geom: ErpImageGeom, vstep: str):
    """Cached per-pixel neighbor stencil: bilinear taps, weights and the unit
    rays at the four tangent-plane neighbor positions."""
    coords = tangent_neighbor_grid(geom, vstep)          # (H, W, 4, 2)
    idx, w = _bilinear_taps(coords, geom)                # (H, W, 4, 4)
    rays = pixel_to_ray(coords[..., 0], coords[..., 1], geom)  # (H, W, 4, 3)
    return idx, w, rays


def depth_normal_map(depth: torch.Tensor, geom: ErpImageGeom, vstep: str = "paper") -> NormalMap:
    """Normals from a depth map via the tangent-plane cross-product stencil.

    Per pixel: P_right/left/down/up = backprojected neighbors; the normal is
    normalize((P_right - P_left) x (P_down - P_up)), sign-flipped toward the
    camera. Invalid where any stencil tap has non-positive depth, where the
    cross product degenerates, or in the POLE_EXCLUDE_ROWS rows nearest each
    pole.
    """
    depth = torch.as_tensor(depth, dtype=torch.float64)
    H, W = geom.shape
    idx, w, rays = _neighbor_sampling(geom, vstep)
    flat = depth.reshape(-1)
    taps = flat[idx]                                   # (H, W, 4, 4)
    taps_valid = (taps > 0).all(dim=-1)                # (H, W, 4)
    d_samp = (taps * w).sum(-1)                        # (H, W, 4)
    points = d_samp[..., None] * rays                  # (H, W, 4, 3)
    e_lon = points[..., 0, :] - points[..., 1, :]
    e_lat = points[..., 2, :] - points[..., 3, :]
    n = torch.linalg.cross(e_lon, e_lat)
    # sqrt(sum^2 + eps) instead of vector_norm: the norm's gradient at the
    # zero vector is NaN and would poison the depth gradients of empty regions
    norm = torch.sqrt((n * n).sum(-1) + CROSS_NORM_MIN**2)

    valid = taps_valid.all(dim=-1) & (norm > CROSS_NORM_MIN * 2)
    valid[:POLE_EXCLUDE_ROWS] = False
    valid[H - POLE_EXCLUDE_ROWS :] = False

    n = n / norm[..., None]
    center_rays = pixel_center_rays(geom)
    sign = torch.where((n * center_rays).sum(-1, keepdim=True) > 0.0, -1.0, 1.0)
    n = n * sign
    vectors = torch.where(valid[..., None], n, torch.zeros((), dtype=torch.float64))
    return NormalMap(vectors=vectors, valid=valid)


def color_gradient_weight(
    image: torch.Tensor,
    geom: ErpImageGeom,
    mode: str = "edge-aware",
    vstep: str = "paper",
) -> torch.Tensor:
    """Per-pixel weight derived from the squared luma gradient.

    The gradient uses central differences along the tangent-plane neighbor
    directions (bilinear samples, horizontal wrap). mode "edge-aware" maps the
    squared magnitude g through exp(-EDGE_DECAY * g) so strong edges, where
    depth is legitimately discontinuous, are down-weighted; mode "literal"
    returns g itself clamped to [0, 1].
    """
    image = torch.as_tensor(image, dtype=torch.float64)
    luma = _LUMA[0] * image[..., 0] + _LUMA[1] * image[..., 1] + _LUMA[2] * image[..., 2]
    idx, w, _ = _neighbor_sampling(geom, vstep)
    samples = (luma.reshape(-1)[idx] * w).sum(-1)      # (H, W, 4)
    gx = 0.5 * (samples[..., 0] - samples[..., 1])
    gy = 0.5 * (samples[..., 2] - samples[..., 3])
    g_sq = gx * gx + gy * gy
    if mode == "edge-aware":
        return torch.exp(-EDGE_DECAY * g_sq)
    if mode == "literal":
        return torch.clamp(g_sq, 0.0, 1.0)
    raise ValueError(f"mode must be 'edge-aware' or 'literal', got {mode!r}")


def dne_map(normal: torch.Tensor, depth_normal: NormalMap, grad_weight: torch.Tensor) -> torch.Tensor:
    """Depth-normal error: grad_weight * ||N_d - normalize(N)|| per pixel.

    The rendered normal is renormalized before comparison (alpha blending
    leaves it sub-unit); pixels invalid in depth_normal or with near-zero
    rendered normals contribute 0.
    """
    normal = torch.as_tensor(normal, dtype=torch.float64)
    n_len = torch.sqrt((normal * normal).sum(-1) + 1e-24)
    valid = depth_normal.valid & (n_len > 1e-6)
    n_hat = normal / n_len[..., None]
    diff = depth_normal.vectors - n_hat
    err = torch.sqrt((diff * diff).sum(-1) + 1e-24)
    return torch.where(valid, grad_weight * err, torch.zeros((), dtype=torch.float64))
