"""Differentiable forward rendering of color, normal and depth maps under the
ERP camera model, plus the backward pass.

The forward pass projects each Gaussian to a 2D splat (ERP center projection,
Jacobian-transformed covariance), sorts splats front to back and alpha-composites
them per pixel with weights w_i = alpha_i * prod_{j<i}(1 - alpha_j). Compositing
runs as one vectorized pass over (splat, covered-pixel) pairs grouped per pixel,
which keeps the per-pixel front-to-back semantics of a tiled rasterizer while
staying tensor-friendly on CPU. Gradients for every Gaussian parameter flow
through the full chain (projection, covariance, blending, depth denominator)
via autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .camera import (
    TWO_PI,
    POLE_EPS,
    ErpImageGeom,
    erp_jacobian,
    pixel_center_rays,
    project_dir,
)
from .gaussians import (
    COV2D_BLUR_FLOOR,
    CameraPose,
    GaussianCloud,
    covariance3d,
    eval_sh,
    smallest_axis_normals,
)

NEAR_CLIP = 0.01            # scene units, distance from the camera center
ALPHA_MAX = 0.999           # per-splat alpha cap
MIN_SPLAT_OPACITY = 1.0 / 255.0
FOOTPRINT_RADIUS = 3.0      # Mahalanobis cutoff (99.7% mass)
TRANSMITTANCE_MIN = 1e-4    # early termination threshold
MIN_DEPTH_WEIGHT = 1e-3     # coverage below this renders depth 0
NORMAL_DOT_MIN = 1e-4       # clamp for the depth denominator |N(p).ray|


@dataclass
class Splat2D:
    """One projected Gaussian in a given view (detached values)."""

    center_px: torch.Tensor      # (2,) continuous pixel coordinates, u wrapped
    inv_cov2: torch.Tensor       # (2, 2) inverse projected covariance, px^-2
    depth: torch.Tensor          # distance from the camera center
    normal_cam: torch.Tensor     # (3,) unit normal in the camera frame
    opacity: torch.Tensor        # activated opacity in (0, 1)
    rgb: torch.Tensor            # (3,) SH-evaluated color for this view
    source_index: int            # index into the cloud
    image_width: int             # for horizontal wrap in alpha_at


class SplatBatch:
    """Depth-sorted splats for one view, stored as tensors.

    Iterating or indexing yields Splat2D views. center_px keeps its autograd
    graph so screen-space positional gradients can be read back after a
    backward pass.
    """

    def __init__(self, center_px, inv_cov2, depth, normal_cam, opacity, rgb,
                 source_index, geom: ErpImageGeom):
        self.center_px = center_px
        self.inv_cov2 = inv_cov2
        self.depth = depth
        self.normal_cam = normal_cam
        self.opacity = opacity
        self.rgb = rgb
        self.source_index = source_index
        self.geom = geom

    def __len__(self) -> int:
        return self.center_px.shape[0]

    def __getitem__(self, i: int) -> Splat2D:
        return Splat2D(
            center_px=self.center_px[i].detach(),
            inv_cov2=self.inv_cov2[i].detach(),
            depth=self.depth[i].detach(),
            normal_cam=self.normal_cam[i].detach(),
            opacity=self.opacity[i].detach(),
            rgb=self.rgb[i].detach(),
            source_index=int(self.source_index[i]),
            image_width=self.geom.width,
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass
class RenderOutput:
    """Per-pixel maps for one viewpoint.

    color is clamped to [0, 1]; normal is the alpha-blended camera-frame
    normal (not renormalized); depth is 0 where accumulated weight is below
    MIN_DEPTH_WEIGHT; weight_sum is sum(w_i) in [0, 1].
    """

    color: torch.Tensor       # (H, W, 3)
    normal: torch.Tensor      # (H, W, 3)
    depth: torch.Tensor       # (H, W)
    weight_sum: torch.Tensor  # (H, W)


@dataclass
class RenderAux:
    """Side products of a render: the splat batch (center_px retains grad when
    parameters require it) and the per-pixel residual transmittance computed
    independently as prod(1 - alpha_i) over processed splats."""

    splats: SplatBatch
    transmittance: torch.Tensor  # (H, W)


@dataclass
class ParamGradients:
    """Per-Gaussian gradients for the raw (unactivated) parameters."""

    xyz: torch.Tensor
    log_scale: torch.Tensor
    rotation: torch.Tensor
    logit_opacity: torch.Tensor
    features_dc: torch.Tensor
    features_rest: torch.Tensor


def prepare_splats(cloud: GaussianCloud, pose: CameraPose) -> SplatBatch:
    """Project the cloud into one view and return visible splats sorted
    front to back.

    Culled: centers closer than NEAR_CLIP to the camera, pole-degenerate
    directions, and opacities below MIN_SPLAT_OPACITY. ERP sees all
    directions, so there is no frustum cull. Ties in depth keep storage order.
    """
    geom = pose.geom
    mu = cloud.xyz
    mu_cam = mu @ pose.R.T + pose.t
    opacity = cloud.opacities
    with torch.no_grad():
        # cull on detached values; norms of culled (possibly zero) vectors
        # must stay out of the autograd graph
        d = torch.linalg.vector_norm(mu_cam, dim=-1)
        rho_sq = mu_cam[..., 0] ** 2 + mu_cam[..., 2] ** 2
        visible = (d > NEAR_CLIP) & (rho_sq > POLE_EPS**2) & (opacity >= MIN_SPLAT_OPACITY)
        idx = torch.nonzero(visible, as_tuple=False).squeeze(-1)

    mu_cam = mu_cam[idx]
    depth = torch.linalg.vector_norm(mu_cam, dim=-1)
    ang = project_dir(mu_cam)
    u = torch.remainder((geom.width / TWO_PI) * (ang.lon + math.pi), geom.width)
    v = (geom.height / TWO_PI) * (2.0 * ang.lat + math.pi)
    center_px = torch.stack((u, v), dim=-1)

    J = erp_jacobian(mu_cam, geom)
    M = J @ pose.R
    cov3 = covariance3d(cloud.scales[idx], cloud._rotation[idx])
    cov2 = M @ cov3 @ M.transpose(-1, -2)
    cov2 = cov2 + COV2D_BLUR_FLOOR * torch.eye(2, dtype=torch.float64)
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    inv_cov2 = torch.stack(
        (torch.stack((c, -b), dim=-1), torch.stack((-b, a), dim=-1)), dim=-2
    ) / det[:, None, None]

    cam_center = pose.camera_center
    n_world = smallest_axis_normals(cloud._rotation[idx], cloud.scales[idx], mu[idx], cam_center)
    normal_cam = n_world @ pose.R.T

    dirs = mu[idx] - cam_center
    dirs = dirs / torch.linalg.vector_norm(dirs, dim=-1, keepdim=True)
    rgb = eval_sh(cloud.active_sh_degree, cloud.features[idx], dirs)

    order = torch.argsort(depth, stable=True)
    return SplatBatch(
        center_px=center_px[order],
        inv_cov2=inv_cov2[order],
        depth=depth[order],
        normal_cam=normal_cam[order],
        opacity=opacity[idx][order],
        rgb=rgb[order],
        source_index=idx[order],
        geom=geom,
    )


def alpha_at(splat: Splat2D, px) -> torch.Tensor:
    """Alpha of one splat at a continuous pixel coordinate.

    alpha = min(ALPHA_MAX, opacity * exp(-0.5 d^T inv_cov2 d)) with the
    horizontal offset wrapped to [-W/2, W/2). No footprint cutoff is applied
    here; render() restricts contributions to Mahalanobis radius <= 3.
    """
    px = torch.as_tensor(px, dtype=torch.float64)
    w = splat.image_width
    du = torch.remainder(px[0] - splat.center_px[0] + w / 2.0, float(w)) - w / 2.0
    dv = px[1] - splat.center_px[1]
    d = torch.stack((du, dv))
    maha_sq = d @ splat.inv_cov2 @ d
    return torch.clamp(splat.opacity * torch.exp(-0.5 * maha_sq), max=ALPHA_MAX)


def _pair_lists(splats: SplatBatch):
    """Flat (pair -> splat, pair -> pixel) index arrays covering, for every
    splat, the integer pixels whose centers fall inside its 3-sigma bounding
    box (wrapped horizontally, clamped vertically)."""
    geom = splats.geom
    H, W = geom.shape
    with torch.no_grad():
        cu = splats.center_px[:, 0]
        cv = splats.center_px[:, 1]
        # bounding half-widths of the 3-Mahalanobis ellipse from the forward
        # covariance diagonal (inv_cov2 is its inverse): sigma_u^2 = c / det'
        inv = splats.inv_cov2
        det_inv = inv[:, 0, 0] * inv[:, 1, 1] - inv[:, 0, 1] ** 2
        var_u = inv[:, 1, 1] / det_inv
        var_v = inv[:, 0, 0] / det_inv
        ru = FOOTPRINT_RADIUS * torch.sqrt(var_u)
        rv = FOOTPRINT_RADIUS * torch.sqrt(var_v)
        ix0 = torch.ceil(cu - ru - 0.5).long()
        ix1 = torch.floor(cu + ru - 0.5).long()
        iy0 = torch.clamp(torch.ceil(cv - rv - 0.5).long(), min=0)
        iy1 = torch.clamp(torch.floor(cv + rv - 0.5).long(), max=H - 1)
        nx = torch.clamp(ix1 - ix0 + 1, min=0, max=W)
        ny = torch.clamp(iy1 - iy0 + 1, min=0)
        counts = nx * ny
        total = int(counts.sum())
        if total == 0:
            empty = torch.zeros(0, dtype=torch.long)
            return empty, empty, empty
        splat_id = torch.repeat_interleave(torch.arange(len(splats)), counts)
        starts = torch.cumsum(counts, 0) - counts
        offs = torch.arange(total) - starts[splat_id]
        px = torch.remainder(ix0[splat_id] + offs % nx[splat_id], W)
        py = iy0[splat_id] + offs // nx[splat_id]
        pixel_id = py * W + px
    return splat_id, pixel_id, px


def render(
    cloud: GaussianCloud,
    pose: CameraPose,
    background,
    *,
    return_aux: bool = False,
):
    """Render color, normal and depth maps for one viewpoint.

    Per pixel, splats whose Mahalanobis radius <= 3 covers the pixel center
    are composited front to back; compositing stops once the transmittance
    drops below TRANSMITTANCE_MIN. color = sum(c_i w_i) + T_final * background;
    normal = sum(R n_i w_i); depth = sum(d_i w_i) / max(|N(p) . ray(p)|,
    NORMAL_DOT_MIN), zeroed where weight_sum < MIN_DEPTH_WEIGHT.

    Returns RenderOutput, or (RenderOutput, RenderAux) when return_aux is set.
    """
    geom = pose.geom
    H, W = geom.shape
    background = torch.as_tensor(background, dtype=torch.float64).reshape(3)

    splats = prepare_splats(cloud, pose)
    needs_grad = splats.center_px.requires_grad
    if needs_grad:
        splats.center_px.retain_grad()

    n_px = H * W
    color = torch.zeros(n_px, 3, dtype=torch.float64)
    normal = torch.zeros(n_px, 3, dtype=torch.float64)
    raw_depth = torch.zeros(n_px, dtype=torch.float64)
    weight_sum = torch.zeros(n_px, dtype=torch.float64)
    log_t_total = torch.zeros(n_px, dtype=torch.float64)

    splat_id, pixel_id, px_col = _pair_lists(splats)
    if splat_id.numel() > 0:
        pix_sorted, perm = torch.sort(pixel_id, stable=True)
        sid = splat_id[perm]
        px_c = px_col[perm].double() + 0.5
        py_c = (pix_sorted // W).double() + 0.5

        cu = splats.center_px[sid, 0]
        cv = splats.center_px[sid, 1]
        du = torch.remainder(px_c - cu + W / 2.0, float(W)) - W / 2.0
        dv = py_c - cv
        inv = splats.inv_cov2[sid]
        maha_sq = (
            inv[:, 0, 0] * du * du + 2.0 * inv[:, 0, 1] * du * dv + inv[:, 1, 1] * dv * dv
        )
        inside = maha_sq <= FOOTPRINT_RADIUS**2
        alpha = torch.clamp(splats.opacity[sid] * torch.exp(-0.5 * maha_sq), max=ALPHA_MAX)
        alpha = alpha * inside

        # exclusive per-pixel cumulative transmittance, front to back
        log_t = torch.log1p(-alpha)
        csum = torch.cumsum(log_t, 0)
        shifted = torch.cat((torch.zeros(1, dtype=torch.float64), csum[:-1]))
        is_start = torch.ones_like(pix_sorted, dtype=torch.bool)
        is_start[1:] = pix_sorted[1:] != pix_sorted[:-1]
        seg_idx = torch.cumsum(is_start.long(), 0) - 1
        seg_base = shifted[torch.nonzero(is_start, as_tuple=False).squeeze(-1)]
        log_t_excl = shifted - seg_base[seg_idx]
        keep = log_t_excl >= math.log(TRANSMITTANCE_MIN)
        t_excl = torch.exp(log_t_excl)
        w = alpha * t_excl * keep

        color = color.index_add(0, pix_sorted, w[:, None] * splats.rgb[sid])
        normal = normal.index_add(0, pix_sorted, w[:, None] * splats.normal_cam[sid])
        raw_depth = raw_depth.index_add(0, pix_sorted, w * splats.depth[sid])
        weight_sum = weight_sum.index_add(0, pix_sorted, w)
        log_t_total = log_t_total.index_add(0, pix_sorted, log_t * keep)

    transmittance = torch.exp(log_t_total)
    color = torch.clamp(color + transmittance[:, None] * background, 0.0, 1.0)

    rays = pixel_center_rays(geom).reshape(n_px, 3)
    denom = torch.clamp(torch.abs((normal * rays).sum(-1)), min=NORMAL_DOT_MIN)
    depth = torch.where(
        weight_sum >= MIN_DEPTH_WEIGHT, raw_depth / denom, torch.zeros((), dtype=torch.float64)
    )

    out = RenderOutput(
        color=color.reshape(H, W, 3),
        normal=normal.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        weight_sum=weight_sum.reshape(H, W),
    )
    if return_aux:
        return out, RenderAux(splats=splats, transmittance=transmittance.reshape(H, W))
    return out


def accumulate_densify_stats(cloud: GaussianCloud, aux: RenderAux):
    """Fold the screen-space positional gradients of the last backward pass
    into the cloud's densification accumulators.

    Gradients w.r.t. the projected centers are rescaled to NDC-like units
    (image spanning [-1, 1]) so the clone/split threshold is resolution
    independent.
    """
    grad = aux.splats.center_px.grad
    if grad is None:
        return
    geom = aux.splats.geom
    scale = torch.tensor([geom.width / 2.0, geom.height / 2.0], dtype=torch.float64)
    norms = torch.linalg.vector_norm(grad * scale, dim=-1)
    src = aux.splats.source_index
    cloud.xyz_gradient_accum.index_add_(0, src, norms)
    cloud.denom.index_add_(0, src, torch.ones_like(norms))


def render_backward(
    cloud: GaussianCloud,
    pose: CameraPose,
    background,
    grad_color,
    grad_normal,
    grad_depth,
) -> ParamGradients:
    """Analytic gradients of the rendered maps w.r.t. every raw parameter.

    Recomputes the forward pass with autograd enabled and pulls the provided
    upstream per-pixel gradients for (color, normal, depth) back through the
    projection, covariance, blending and depth chain. Also accumulates the
    per-Gaussian screen-space positional gradient norms into the cloud's
    densification statistics.
    """
    cloud.require_grad_(True)
    params = cloud.raw_parameters()
    out, aux = render(cloud, pose, background, return_aux=True)
    inputs = list(params.values())
    with_centers = len(aux.splats) > 0 and aux.splats.center_px.grad_fn is not None
    if with_centers:
        inputs.append(aux.splats.center_px)
    grads = torch.autograd.grad(
        outputs=(out.color, out.normal, out.depth),
        inputs=tuple(inputs),
        grad_outputs=(
            torch.as_tensor(grad_color, dtype=torch.float64).reshape(out.color.shape),
            torch.as_tensor(grad_normal, dtype=torch.float64).reshape(out.normal.shape),
            torch.as_tensor(grad_depth, dtype=torch.float64).reshape(out.depth.shape),
        ),
        allow_unused=True,
        materialize_grads=True,
    )
    by_name = dict(zip(params.keys(), grads))
    if with_centers:
        aux.splats.center_px.grad = grads[-1]
        accumulate_densify_stats(cloud, aux)
    return ParamGradients(
        xyz=by_name["xyz"],
        log_scale=by_name["log_scale"],
        rotation=by_name["rotation"],
        logit_opacity=by_name["logit_opacity"],
        features_dc=by_name["features_dc"],
        features_rest=by_name["features_rest"],
    )
