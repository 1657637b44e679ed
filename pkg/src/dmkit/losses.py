"""Training objective for joint depth / ego-motion / residual-translation
recovery from a frame pair.

Three loss families: regularizers on the dense residual translation field
(group smoothness + self-normalizing L1/2 sparsity), edge-aware disparity
smoothness, and the consistency pair (motion cycle consistency plus
occlusion-masked photometric L1 + SSIM). All spatial integrals are
discretized as means over pixels, which makes every term
resolution-independent; the shipped default weights assume that
convention.

The regularizers and consistency terms are applied in both frame orders;
disparity smoothness is applied to each frame once.
"""

from __future__ import annotations

import importlib.resources
import json
from dataclasses import dataclass, asdict

import numpy as np

from . import engine as eng
from . import geometry as geo
from .engine import EPS_ABS, Node, Tape, VectorField3
from .geometry import IntrinsicsNodes

# Photometric occlusion tolerance: content is treated as visible where its
# warped depth does not exceed the resampled target depth by more than this.
EPS_OCC = 1e-3

# SSIM stabilizers for unit-range images, 3x3 uniform window.
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class HyperParams:
    """Loss weights. All weights nonnegative; eps_norm > 0 guards the
    cycle-consistency denominators."""

    alpha_mot: float
    beta_mot: float
    alpha_dep: float
    alpha_cyc: float
    beta_cyc: float
    alpha_rgb: float
    beta_rgb: float
    eps_norm: float

    def __post_init__(self):
        for name in ("alpha_mot", "beta_mot", "alpha_dep", "alpha_cyc",
                     "beta_cyc", "alpha_rgb", "beta_rgb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.eps_norm <= 0:
            raise ValueError("eps_norm must be positive")

    @classmethod
    def defaults(cls) -> "HyperParams":
        """Weights from the packaged config file, calibrated so every
        component lands at a comparable magnitude on the synthetic suite."""
        text = (
            importlib.resources.files("dmkit") / "data" / "default_hyperparams.json"
        ).read_text()
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(**{k: float(v) for k, v in d.items() if k != "schema"})

    def to_dict(self) -> dict:
        out = {"schema": "dmkit.hyper/1"}
        out.update(asdict(self))
        return out


@dataclass
class LossBreakdown:
    """Named loss components, all scalar nodes and all nonnegative.

    ``total = alpha_mot * group_smooth + beta_mot * sparsity + depth_smooth
    + cyc_rot + cyc_trans + photo_l1 + photo_ssim`` -- the last five carry
    their weights already.
    """

    group_smooth: Node
    sparsity: Node
    depth_smooth: Node
    cyc_rot: Node
    cyc_trans: Node
    photo_l1: Node
    photo_ssim: Node
    total: Node

    def to_floats(self) -> dict[str, float]:
        return {
            "group_smooth": self.group_smooth.item(),
            "sparsity": self.sparsity.item(),
            "depth_smooth": self.depth_smooth.item(),
            "cyc_rot": self.cyc_rot.item(),
            "cyc_trans": self.cyc_trans.item(),
            "photo_l1": self.photo_l1.item(),
            "photo_ssim": self.photo_ssim.item(),
            "total": self.total.item(),
        }


@dataclass
class MotionNodes:
    """One direction's motion parameters on a tape: Euler angles, ego
    translation, and the per-pixel residual translation field."""

    euler: tuple[Node, Node, Node]
    t_ego: tuple[Node, Node, Node]
    t_res: VectorField3


def group_smoothness(t: VectorField3) -> Node:
    """Total-variation-style penalty on each translation component.

    mean over pixels of sqrt((d_u T_i)^2 + (d_v T_i)^2 + EPS_ABS^2),
    summed over the three components; near-zero for spatially constant
    fields, concentrated on motion boundaries otherwise.
    """
    parts = []
    for comp in t.components:
        du = eng.spatial_diff(comp, "u")
        dv = eng.spatial_diff(comp, "v")
        parts.append(eng.reduce_mean(eng.sqrt(du * du + dv * dv + EPS_ABS ** 2)))
    return parts[0] + parts[1] + parts[2]


def sparsity_l_half(t: VectorField3) -> Node:
    """Self-normalizing concave sparsity penalty on the translation field.

    Per component, with m the spatial mean of |T_i| (kept differentiable):

        2 * mean( sqrt(m^2 + m * |T_i|) )

    which equals 2 * m * mean(sqrt(1 + |T_i| / m)) for m > 0 and tends to
    0 as the field vanishes. The product form avoids the division, making
    the penalty exactly 1-homogeneous: L(s*T) = s*L(T) for s > 0. At equal
    mean magnitude, concentrated fields score strictly lower than
    spread-out ones, which is what pushes background residuals to zero.
    """
    parts = []
    for comp in t.components:
        mag = eng.absolute(comp)
        m = eng.reduce_mean(mag)
        parts.append(2.0 * eng.reduce_mean(eng.sqrt(m * m + m * mag)))
    return parts[0] + parts[1] + parts[2]


def motion_regularizer(t_res: VectorField3, h: HyperParams) -> Node:
    """Weighted sum of group smoothness and sparsity, applied to the
    residual translation field only (never to the ego translation)."""
    return h.alpha_mot * group_smoothness(t_res) + h.beta_mot * sparsity_l_half(t_res)


def _edge_weights(image_channels: list[Node]) -> tuple[np.ndarray, np.ndarray]:
    """exp(-||grad I||) per axis; Euclidean norm over color channels.

    Derived from forward values only: the image is data, not a parameter.
    """
    shape = image_channels[0].shape
    su = np.zeros(shape)
    sv = np.zeros(shape)
    for ch in image_channels:
        v = ch.value
        du = np.zeros(shape)
        dv = np.zeros(shape)
        du[:, :-1] = v[:, 1:] - v[:, :-1]
        dv[:-1, :] = v[1:, :] - v[:-1, :]
        su += du * du
        sv += dv * dv
    return np.exp(-np.sqrt(su)), np.exp(-np.sqrt(sv))


def depth_smoothness(disparity: Node, image_channels: list[Node], h: HyperParams) -> Node:
    """Edge-aware smoothness on a disparity (inverse depth) map: disparity
    gradients are cheap where the image has strong color edges."""
    tape = disparity.tape
    wu, wv = _edge_weights(image_channels)
    du = eng.abs_smooth(eng.spatial_diff(disparity, "u"))
    dv = eng.abs_smooth(eng.spatial_diff(disparity, "v"))
    term = du * tape.constant(wu) + dv * tape.constant(wv)
    return h.alpha_dep * eng.reduce_mean(term)


def _frob_sq_diff_identity(rot: list[list[Node]]) -> Node:
    """Squared Frobenius norm of (rot - identity)."""
    acc = None
    for i in range(3):
        for j in range(3):
            d = rot[i][j] - (1.0 if i == j else 0.0)
            sq = d * d
            acc = sq if acc is None else acc + sq
    return acc


def _frob_sq_product_diff_identity(a: list[list[Node]], b: list[list[Node]]) -> Node:
    """Squared Frobenius norm of (a @ b - identity)."""
    acc = None
    for i in range(3):
        for j in range(3):
            e = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]
            d = e - (1.0 if i == j else 0.0)
            sq = d * d
            acc = sq if acc is None else acc + sq
    return acc


def cycle_consistency(
    rot: list[list[Node]],
    t_total: VectorField3,
    rot_inv: list[list[Node]],
    t_inv_warped: VectorField3,
    mask: Node,
    h: HyperParams,
) -> tuple[Node, Node]:
    """Penalty unless the reverse motion inverts the forward motion.

    Rotation part compares the composed rotation with the identity;
    translation part asks, per pixel, that rotating the forward total
    translation into the reverse frame cancels the warped reverse
    translation. Both ratios are normalized by the motion magnitudes
    (eps_norm-guarded, so zero motion pairs cost zero). ``t_inv_warped``
    must be the reverse-direction field resampled at the forward warp
    coordinates with ``mask`` the corresponding validity; masked pixels
    contribute 0. Returns the weighted (rotation, translation) nodes.
    """
    num = _frob_sq_product_diff_identity(rot, rot_inv)
    den = _frob_sq_diff_identity(rot) + _frob_sq_diff_identity(rot_inv) + h.eps_norm
    rot_term = h.alpha_cyc * (num / den)

    rotated = geo.mat_apply_vec(rot_inv, t_total.components)
    rx = rotated[0] + t_inv_warped.x
    ry = rotated[1] + t_inv_warped.y
    rz = rotated[2] + t_inv_warped.z
    num_px = rx * rx + ry * ry + rz * rz
    t1, t2, t3 = t_total.components
    w1, w2, w3 = t_inv_warped.components
    den_px = (
        t1 * t1 + t2 * t2 + t3 * t3 + w1 * w1 + w2 * w2 + w3 * w3 + h.eps_norm
    )
    trans_term = h.beta_cyc * eng.reduce_mean(mask * (num_px / den_px))
    return rot_term, trans_term


def ssim(a_channels: list[Node], b_channels: list[Node]) -> Node:
    """Mean structural similarity over valid 3x3 windows and channels.

    Uniform 3x3 averaging, stabilizers C1 = 0.01^2 and C2 = 0.03^2 for
    unit-range inputs; fully differentiable.
    """
    if len(a_channels) != len(b_channels):
        raise eng.ShapeError("channel counts differ")
    acc = None
    for a, b in zip(a_channels, b_channels):
        mu_a = eng.box3(a)
        mu_b = eng.box3(b)
        sig_a = eng.box3(a * a) - mu_a * mu_a
        sig_b = eng.box3(b * b) - mu_b * mu_b
        sig_ab = eng.box3(a * b) - mu_a * mu_b
        num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sig_ab + SSIM_C2)
        den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sig_a + sig_b + SSIM_C2)
        m = eng.reduce_mean(num / den)
        acc = m if acc is None else acc + m
    return acc * (1.0 / len(a_channels))


def photometric_loss(
    i_channels: list[Node],
    iw_channels: list[Node],
    z_prime: Node,
    depth_warped: Node,
    mask: Node,
    h: HyperParams,
) -> tuple[Node, Node]:
    """Occlusion-masked photometric error between a frame and the other
    frame warped into its viewpoint.

    The occlusion indicator keeps pixels whose warped depth z' does not
    exceed the resampled target depth (plus EPS_OCC): content that ends up
    behind the target surface is hidden there and carries no photometric
    signal. The indicator is gradient-detached so the optimizer cannot
    fade the mask instead of explaining the image. L1 sums over channels
    and averages over pixels; SSIM is computed on mask-multiplied images.
    Returns the weighted (l1, ssim) nodes.
    """
    tape = z_prime.tape
    occ = (z_prime.value <= depth_warped.value + EPS_OCC).astype(np.float64)
    m = tape.constant(occ * mask.value)

    l1_sum = None
    for i_c, iw_c in zip(i_channels, iw_channels):
        d = eng.absolute(i_c - iw_c)
        l1_sum = d if l1_sum is None else l1_sum + d
    l1 = h.alpha_rgb * eng.reduce_mean(l1_sum * m)

    masked_a = [c * m for c in i_channels]
    masked_b = [c * m for c in iw_channels]
    ssim_term = h.beta_rgb * ((1.0 - ssim(masked_a, masked_b)) * 0.5)
    return l1, ssim_term


def pair_loss(
    frames_a: list[Node],
    frames_b: list[Node],
    depth_a: Node,
    depth_b: Node,
    motion_ab: MotionNodes,
    motion_ba: MotionNodes,
    k: IntrinsicsNodes,
    h: HyperParams,
) -> LossBreakdown:
    """Full bidirectional objective for one frame pair.

    Motion regularization, cycle consistency, and photometric consistency
    are evaluated in both frame orders; disparity smoothness is evaluated
    once per frame. Swapping the pair (with its motions) leaves the total
    unchanged.
    """
    tape = depth_a.tape
    zero = tape.constant(0.0)

    rot_ab = geo.euler_to_rotation(*motion_ab.euler)
    rot_ba = geo.euler_to_rotation(*motion_ba.euler)
    total_ab = geo.total_translation(motion_ab.t_res, motion_ab.t_ego)
    total_ba = geo.total_translation(motion_ba.t_res, motion_ba.t_ego)

    group = zero
    sparse = zero
    cyc_rot = zero
    cyc_trans = zero
    photo_l1 = zero
    photo_ssim = zero

    directions = (
        (frames_a, frames_b, depth_a, depth_b, rot_ab, total_ab, motion_ab, rot_ba, total_ba),
        (frames_b, frames_a, depth_b, depth_a, rot_ba, total_ba, motion_ba, rot_ab, total_ab),
    )
    for (src, dst, d_src, d_dst, rot_f, total_f, mot_f, rot_r, total_r) in directions:
        group = group + group_smoothness(mot_f.t_res)
        sparse = sparse + sparsity_l_half(mot_f.t_res)

        wr = geo.warp(d_src, k, rot_f, total_f)
        rs = geo.resample(dst, d_dst, wr)
        l1, ss = photometric_loss(src, rs.channels, wr.z, rs.depth, rs.mask, h)
        photo_l1 = photo_l1 + l1
        photo_ssim = photo_ssim + ss

        inv_x, mx = eng.bilinear_sample(total_r.x, wr.u, wr.v)
        inv_y, _ = eng.bilinear_sample(total_r.y, wr.u, wr.v)
        inv_z, _ = eng.bilinear_sample(total_r.z, wr.u, wr.v)
        cyc_mask = eng.detach(wr.mask * mx)
        cr, ct = cycle_consistency(
            rot_f, total_f, rot_r, VectorField3(inv_x, inv_y, inv_z), cyc_mask, h
        )
        cyc_rot = cyc_rot + cr
        cyc_trans = cyc_trans + ct

    depth_smooth = zero
    for frames, depth in ((frames_a, depth_a), (frames_b, depth_b)):
        disparity = 1.0 / depth
        depth_smooth = depth_smooth + depth_smoothness(disparity, frames, h)

    total = (
        h.alpha_mot * group
        + h.beta_mot * sparse
        + depth_smooth
        + cyc_rot
        + cyc_trans
        + photo_l1
        + photo_ssim
    )
    return LossBreakdown(
        group_smooth=group,
        sparsity=sparse,
        depth_smooth=depth_smooth,
        cyc_rot=cyc_rot,
        cyc_trans=cyc_trans,
        photo_l1=photo_l1,
        photo_ssim=photo_ssim,
        total=total,
    )


def frames_to_nodes(tape: Tape, image: np.ndarray) -> list[Node]:
    """Split an (H, W, 3) image into per-channel constant nodes."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise eng.ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    return [tape.constant(image[:, :, c]) for c in range(3)]
