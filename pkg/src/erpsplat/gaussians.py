"""3D Gaussian primitives, the optimizable scene container and camera poses.

Parameters are stored unconstrained and activated on use: scales as
exp(log_scale), opacity as sigmoid(logit), quaternions unnormalized in storage
and normalized whenever a rotation matrix is built. Color is a spherical
harmonics expansion of degree 0..3 stored as a DC band plus higher bands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .camera import ErpImageGeom, erp_jacobian

COV2D_BLUR_FLOOR = 0.3  # px^2 added to the projected covariance diagonal

# Real spherical harmonics basis constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


def rgb_to_sh_dc(rgb: torch.Tensor) -> torch.Tensor:
    """DC spherical-harmonic coefficient reproducing a flat color in [0, 1]."""
    return (torch.as_tensor(rgb, dtype=torch.float64) - 0.5) / SH_C0


def sh_dc_to_rgb(dc: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(dc, dtype=torch.float64) * SH_C0 + 0.5


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    return torch.log(x / (1.0 - x))


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from (possibly unnormalized) quaternions.

    Args:
        q: (..., 4) quaternions in (w, x, y, z) order.

    Returns:
        (..., 3, 3) rotation matrices.
    """
    q = torch.as_tensor(q, dtype=torch.float64)
    q = q / torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return torch.stack(
        (
            torch.stack((1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)), dim=-1),
            torch.stack((2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)), dim=-1),
            torch.stack((2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)), dim=-1),
        ),
        dim=-2,
    )


def covariance3d(scale: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """World-frame covariance R(q) diag(s)^2 R(q)^T.

    Symmetric positive semi-definite with eigenvalues {s_x^2, s_y^2, s_z^2}.
    scale is the activated (strictly positive) scale, broadcastable (..., 3);
    q is (..., 4).
    """
    scale = torch.as_tensor(scale, dtype=torch.float64)
    R = quat_to_rotmat(q)
    L = R * scale[..., None, :]
    return L @ L.transpose(-1, -2)


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform plus ERP image dimensions.

    x_cam = R @ x_world + t. R must be orthonormal with det +1 (checked to
    1e-6 on construction).
    """

    R: torch.Tensor
    t: torch.Tensor
    geom: ErpImageGeom

    def __post_init__(self):
        R = torch.as_tensor(self.R, dtype=torch.float64)
        t = torch.as_tensor(self.t, dtype=torch.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"R must be 3x3, got {tuple(R.shape)}")
        err = torch.linalg.matrix_norm(R @ R.T - torch.eye(3, dtype=torch.float64))
        if float(err) > 1e-6 or abs(float(torch.linalg.det(R)) - 1.0) > 1e-6:
            raise ValueError("R is not a proper rotation (orthonormality > 1e-6)")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_quaternion(cls, qvec, tvec, geom: ErpImageGeom) -> "CameraPose":
        """Pose from a world-to-camera quaternion (w, x, y, z) and translation."""
        return cls(R=quat_to_rotmat(torch.as_tensor(qvec, dtype=torch.float64)),
                   t=torch.as_tensor(tvec, dtype=torch.float64), geom=geom)

    @property
    def camera_center(self) -> torch.Tensor:
        """Camera position in world coordinates (-R^T t)."""
        return -self.R.T @ self.t

    def to_camera(self, x_world: torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(x_world, dtype=torch.float64)
        return x @ self.R.T + self.t


def project_covariance(sigma3: torch.Tensor, pose: CameraPose, mu_world) -> torch.Tensor:
    """Projected 2x2 pixel-space covariance of a world-frame Gaussian.

    Affine approximation J R Sigma R^T J^T with J the ERP Jacobian at the
    camera-frame center (translation moves the linearization point but only
    the rotation conjugates the covariance). A blur floor of
    COV2D_BLUR_FLOOR px^2 is added to the diagonal so sub-pixel Gaussians
    stay visible and the 2x2 inverse is well conditioned.

    Raises:
        PoleDegenerateError: when the center projects onto a pole.
    """
    sigma3 = torch.as_tensor(sigma3, dtype=torch.float64)
    mu_cam = pose.to_camera(mu_world)
    J = erp_jacobian(mu_cam, pose.geom)
    M = J @ pose.R
    cov2 = M @ sigma3 @ M.transpose(-1, -2)
    return cov2 + COV2D_BLUR_FLOOR * torch.eye(2, dtype=torch.float64)


def smallest_axis_normals(
    rotations: torch.Tensor, scales: torch.Tensor, mu: torch.Tensor, cam_center: torch.Tensor
) -> torch.Tensor:
    """World-frame unit normals of a batch of Gaussians.

    The normal is the rotation column matching the smallest activated scale
    (ties broken by the lowest index), sign-flipped per view so it points
    toward the camera center.
    """
    R = quat_to_rotmat(rotations)
    idx = torch.argmin(scales, dim=-1)
    n = torch.gather(R, 2, idx[:, None, None].expand(-1, 3, 1)).squeeze(-1)
    to_cam = torch.as_tensor(cam_center, dtype=torch.float64) - mu
    sign = torch.where((n * to_cam).sum(dim=-1, keepdim=True) < 0.0, -1.0, 1.0)
    return n * sign


@dataclass
class Gaussian3D:
    """A single anisotropic 3D Gaussian primitive (raw, unactivated storage).

    color holds spherical-harmonic coefficients of shape ((L+1)^2, 3) for a
    degree L in 0..3; row 0 is the DC band.
    """

    mu: torch.Tensor
    log_scale: torch.Tensor
    rot: torch.Tensor
    logit_opacity: torch.Tensor
    color: torch.Tensor

    def __post_init__(self):
        self.mu = torch.as_tensor(self.mu, dtype=torch.float64).reshape(3)
        self.log_scale = torch.as_tensor(self.log_scale, dtype=torch.float64).reshape(3)
        self.rot = torch.as_tensor(self.rot, dtype=torch.float64).reshape(4)
        self.logit_opacity = torch.as_tensor(self.logit_opacity, dtype=torch.float64).reshape(())
        self.color = torch.as_tensor(self.color, dtype=torch.float64).reshape(-1, 3)
        n_coeffs = self.color.shape[0]
        degree = int(math.isqrt(n_coeffs)) - 1
        if (degree + 1) ** 2 != n_coeffs or not 0 <= degree <= 3:
            raise ValueError(f"color must hold (L+1)^2 coefficient rows, L in 0..3; got {n_coeffs}")

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)

    @property
    def opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.logit_opacity)

    def covariance(self) -> torch.Tensor:
        return covariance3d(self.scale, self.rot)


def gaussian_normal(g: Gaussian3D, cam_center_world) -> torch.Tensor:
    """Unit world-frame normal of g: the smallest-scale axis of its rotation,
    pointed toward the camera center."""
    return smallest_axis_normals(
        g.rot[None], g.scale[None], g.mu[None],
        torch.as_tensor(cam_center_world, dtype=torch.float64),
    )[0]


def eval_sh(degree: int, coeffs: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Evaluate real spherical harmonics colors along unit view directions.

    Args:
        degree: active band limit, 0..3.
        coeffs: (N, K, 3) coefficients with K >= (degree+1)^2.
        dirs: (N, 3) unit directions from the camera toward each Gaussian.

    Returns:
        (N, 3) colors including the +0.5 DC offset, clamped to >= 0.
    """
    result = SH_C0 * coeffs[:, 0]
    if degree > 0:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        result = result - SH_C1 * y * coeffs[:, 1] + SH_C1 * z * coeffs[:, 2] - SH_C1 * x * coeffs[:, 3]
        if degree > 1:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            result = (
                result
                + SH_C2[0] * xy * coeffs[:, 4]
                + SH_C2[1] * yz * coeffs[:, 5]
                + SH_C2[2] * (2.0 * zz - xx - yy) * coeffs[:, 6]
                + SH_C2[3] * xz * coeffs[:, 7]
                + SH_C2[4] * (xx - yy) * coeffs[:, 8]
            )
            if degree > 2:
                result = (
                    result
                    + SH_C3[0] * y * (3.0 * xx - yy) * coeffs[:, 9]
                    + SH_C3[1] * xy * z * coeffs[:, 10]
                    + SH_C3[2] * y * (4.0 * zz - xx - yy) * coeffs[:, 11]
                    + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * coeffs[:, 12]
                    + SH_C3[4] * x * (4.0 * zz - xx - yy) * coeffs[:, 13]
                    + SH_C3[5] * z * (xx - yy) * coeffs[:, 14]
                    + SH_C3[6] * x * (xx - 3.0 * yy) * coeffs[:, 15]
                )
    return torch.clamp(result + 0.5, min=0.0)


class GaussianCloud:
    """The optimizable scene: parameter tensors for N Gaussians plus the Adam
    state and densification statistics kept aligned with them.

    Many concurrent readers are safe; the training loop is the single writer.
    """

    def __init__(
        self,
        xyz: torch.Tensor,
        log_scale: torch.Tensor,
        rotation: torch.Tensor,
        logit_opacity: torch.Tensor,
        features_dc: torch.Tensor,
        features_rest: torch.Tensor,
        max_sh_degree: int = 0,
    ):
        n = xyz.shape[0]
        if n < 1:
            raise ValueError("GaussianCloud needs at least one Gaussian")
        self._xyz = torch.as_tensor(xyz, dtype=torch.float64).reshape(n, 3)
        self._log_scale = torch.as_tensor(log_scale, dtype=torch.float64).reshape(n, 3)
        self._rotation = torch.as_tensor(rotation, dtype=torch.float64).reshape(n, 4)
        self._logit_opacity = torch.as_tensor(logit_opacity, dtype=torch.float64).reshape(n, 1)
        self._features_dc = torch.as_tensor(features_dc, dtype=torch.float64).reshape(n, 1, 3)
        n_rest = (max_sh_degree + 1) ** 2 - 1
        self._features_rest = torch.as_tensor(features_rest, dtype=torch.float64).reshape(n, n_rest, 3)
        self.max_sh_degree = max_sh_degree
        self.active_sh_degree = 0
        self.xyz_gradient_accum = torch.zeros(n, dtype=torch.float64)
        self.denom = torch.zeros(n, dtype=torch.float64)
        self.optimizer: torch.optim.Adam | None = None

    # -- parameter access -------------------------------------------------

    def __len__(self) -> int:
        return self._xyz.shape[0]

    @property
    def xyz(self) -> torch.Tensor:
        return self._xyz

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self._log_scale)

    @property
    def rotations(self) -> torch.Tensor:
        return self._rotation / torch.linalg.vector_norm(self._rotation, dim=-1, keepdim=True)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self._logit_opacity).squeeze(-1)

    @property
    def features(self) -> torch.Tensor:
        """(N, (L+1)^2, 3) concatenated SH coefficients."""
        return torch.cat((self._features_dc, self._features_rest), dim=1)

    def raw_parameters(self) -> dict[str, torch.Tensor]:
        return {
            "xyz": self._xyz,
            "log_scale": self._log_scale,
            "rotation": self._rotation,
            "logit_opacity": self._logit_opacity,
            "features_dc": self._features_dc,
            "features_rest": self._features_rest,
        }

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            mu=self._xyz[i].detach(),
            log_scale=self._log_scale[i].detach(),
            rot=self._rotation[i].detach(),
            logit_opacity=self._logit_opacity[i, 0].detach(),
            color=self.features[i].detach(),
        )

    def oneup_sh_degree(self):
        if self.active_sh_degree < self.max_sh_degree:
            self.active_sh_degree += 1

    def require_grad_(self, flag: bool = True) -> "GaussianCloud":
        for p in self.raw_parameters().values():
            p.requires_grad_(flag)
        return self

    def clone_detached(self) -> "GaussianCloud":
        c = GaussianCloud(
            self._xyz.detach().clone(),
            self._log_scale.detach().clone(),
            self._rotation.detach().clone(),
            self._logit_opacity.detach().clone(),
            self._features_dc.detach().clone(),
            self._features_rest.detach().clone(),
            max_sh_degree=self.max_sh_degree,
        )
        c.active_sh_degree = self.active_sh_degree
        return c

    def check_aligned(self):
        """Invariant: optimizer moments and densification stats match N."""
        n = len(self)
        assert self.xyz_gradient_accum.shape[0] == n
        assert self.denom.shape[0] == n
        if self.optimizer is not None:
            for group in self.optimizer.param_groups:
                p = group["params"][0]
                assert p.shape[0] == n
                state = self.optimizer.state.get(p, {})
                if "exp_avg" in state:
                    assert state["exp_avg"].shape[0] == n
                    assert state["exp_avg_sq"].shape[0] == n
