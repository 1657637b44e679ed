"""Pinhole projection, Euler-angle rotations, and the differentiable
per-pixel warp  z' p' = K R K^-1 z p + K T.

Image coordinates: u runs along the width (array axis 1), v along the
height (axis 0); pixel centers sit at integer coordinates. Rotations use
a fixed x-y-z application order, R = Rz(c) @ Ry(b) @ Rx(a).

Everything here exists twice: as plain numpy (for the scene generator
and oracles) and as tape-node graphs (for the losses and fitting).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import engine as eng
from .engine import Node, ShapeError, Tape, VectorField3

# Points warped to depth <= Z_MIN are masked out rather than divided by;
# the photometric loss has no meaning for content at/behind the camera.
Z_MIN = 1e-3


@dataclass
class Intrinsics:
    """Pinhole camera: focal lengths and optical center, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self, width: int | None = None, height: int | None = None):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if width is not None and not (0 < self.cx < width):
            raise ValueError(f"cx={self.cx} outside (0, {width})")
        if height is not None and not (0 < self.cy < height):
            raise ValueError(f"cy={self.cy} outside (0, {height})")
        return self

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_json(self) -> str:
        return json.dumps({"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy})

    @classmethod
    def from_json(cls, text: str) -> "Intrinsics":
        d = json.loads(text)
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass
class RigidMotion:
    """Camera-frame rigid motion: 3 Euler angles (radians) + translation."""

    euler: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.euler = np.asarray(self.euler, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def rotation(self) -> np.ndarray:
        return rotation_from_euler(self.euler)

    def inverse(self) -> "RigidMotion":
        rt = self.rotation().T
        return RigidMotion(euler_from_rotation(rt), -rt @ self.translation)

    def to_dict(self) -> dict:
        return {"euler": self.euler.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidMotion":
        return cls(np.asarray(d["euler"]), np.asarray(d["translation"]))

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.zeros(3), np.zeros(3))


def rotation_from_euler(euler) -> np.ndarray:
    """3x3 rotation for angles (a, b, c) applied in x-y-z order."""
    a, b, c = np.asarray(euler, dtype=np.float64).reshape(3)
    sa, ca = np.sin(a), np.cos(a)
    sb, cb = np.sin(b), np.cos(b)
    sc, cc = np.sin(c), np.cos(c)
    return np.array(
        [
            [cb * cc, sa * sb * cc - ca * sc, ca * sb * cc + sa * sc],
            [cb * sc, sa * sb * sc + ca * cc, ca * sb * sc - sa * cc],
            [-sb, sa * cb, ca * cb],
        ]
    )


def euler_from_rotation(rot: np.ndarray) -> np.ndarray:
    """Recover (a, b, c) with R = Rz(c) Ry(b) Rx(a); |b| < pi/2 branch."""
    rot = np.asarray(rot, dtype=np.float64)
    b = -np.arcsin(np.clip(rot[2, 0], -1.0, 1.0))
    cb = np.cos(b)
    if abs(cb) < 1e-9:
        # gimbal degeneracy: fold everything into a and c
        a = np.arctan2(-rot[0, 1], rot[1, 1])
        c = 0.0
    else:
        a = np.arctan2(rot[2, 1], rot[2, 2])
        c = np.arctan2(rot[1, 0], rot[0, 0])
    return np.array([a, b, c])


# ---------------------------------------------------------------------------
# tape-side building blocks
# ---------------------------------------------------------------------------


@dataclass
class IntrinsicsNodes:
    """Intrinsics lifted onto a tape (leaves when trainable, else constants)."""

    fx: Node
    fy: Node
    cx: Node
    cy: Node

    @classmethod
    def lift(cls, tape: Tape, k: Intrinsics, trainable: bool = False, prefix: str = "K"):
        mk = (lambda n, v: tape.leaf(f"{prefix}_{n}", v)) if trainable else (lambda n, v: tape.constant(v))
        return cls(mk("fx", k.fx), mk("fy", k.fy), mk("cx", k.cx), mk("cy", k.cy))

    def snapshot(self) -> Intrinsics:
        return Intrinsics(self.fx.item(), self.fy.item(), self.cx.item(), self.cy.item())


def euler_to_rotation(rx: Node, ry: Node, rz: Node) -> list[list[Node]]:
    """Differentiable 3x3 rotation from angle nodes, x-y-z order."""
    sa, ca = eng.sin(rx), eng.cos(rx)
    sb, cb = eng.sin(ry), eng.cos(ry)
    sc, cc = eng.sin(rz), eng.cos(rz)
    return [
        [cb * cc, sa * sb * cc - ca * sc, ca * sb * cc + sa * sc],
        [cb * sc, sa * sb * sc + ca * cc, ca * sb * sc - sa * cc],
        [-sb, sa * cb, ca * cb],
    ]


def rotation_transpose(rot: list[list[Node]]) -> list[list[Node]]:
    return [[rot[j][i] for j in range(3)] for i in range(3)]


def mat_apply_vec(rot: list[list[Node]], vec) -> list[Node]:
    """Apply a node matrix to a 3-sequence of nodes (scalars or fields)."""
    return [
        rot[i][0] * vec[0] + rot[i][1] * vec[1] + rot[i][2] * vec[2]
        for i in range(3)
    ]


def pixel_grid(tape: Tape, height: int, width: int) -> tuple[Node, Node]:
    """Constant (u, v) coordinate fields for an image of the given size."""
    vv, uu = np.meshgrid(
        np.arange(height, dtype=np.float64),
        np.arange(width, dtype=np.float64),
        indexing="ij",
    )
    return tape.constant(uu), tape.constant(vv)


def total_translation(t_res: VectorField3, t_ego: tuple[Node, Node, Node]) -> VectorField3:
    """Per-pixel total translation: residual field plus the ego 3-vector."""
    return VectorField3(t_res.x + t_ego[0], t_res.y + t_ego[1], t_res.z + t_ego[2])


@dataclass
class WarpResult:
    """Warped pixel coordinates and depth, plus a {0,1} validity mask.

    The mask is a gradient-detached constant: 0 wherever the warped depth
    falls at or below Z_MIN or the coordinates leave the image.
    """

    u: Node
    v: Node
    z: Node
    mask: Node


def warp(
    depth: Node,
    k: IntrinsicsNodes,
    rot: list[list[Node]],
    t: VectorField3,
    grid_u: Node | None = None,
    grid_v: Node | None = None,
    z_min: float = Z_MIN,
) -> WarpResult:
    """Map every pixel of a depth map into the other camera.

    For homogeneous pixel p = (u, v, 1) with depth z the warped location
    satisfies z' p' = K R K^-1 z p + K T(u, v). A constant translation
    field reproduces pure ego-motion. Pixels with z' <= z_min are masked,
    never divided.
    """
    if depth.is_scalar:
        raise ShapeError("warp requires a depth field")
    tape = depth.tape
    h, w = depth.shape
    if grid_u is None or grid_v is None:
        grid_u, grid_v = pixel_grid(tape, h, w)
    x = (grid_u - k.cx) / k.fx * depth
    y = (grid_v - k.cy) / k.fy * depth
    px, py, pz = mat_apply_vec(rot, (x, y, depth))
    px = px + t.x
    py = py + t.y
    pz = pz + t.z
    z_safe = eng.maximum(pz, tape.constant(z_min))
    u2 = k.fx * (px / z_safe) + k.cx
    v2 = k.fy * (py / z_safe) + k.cy
    valid = (
        (pz.value > z_min)
        & (u2.value >= 0.0)
        & (u2.value <= w - 1.0)
        & (v2.value >= 0.0)
        & (v2.value <= h - 1.0)
    )
    return WarpResult(u2, v2, pz, tape.constant(valid.astype(np.float64)))


@dataclass
class ResampleResult:
    """The other frame pulled back through a warp onto the source grid."""

    channels: list[Node]
    depth: Node
    mask: Node


def resample(frame_channels: list[Node], frame_depth: Node, wr: WarpResult) -> ResampleResult:
    """Bilinearly sample the target frame (and its depth) at warped coords.

    The returned mask combines the warp validity with the sampling
    footprint, so it is 1 only where the photometric comparison is
    geometrically meaningful.
    """
    sampled = []
    mask = wr.mask
    for ch in frame_channels:
        node, m = eng.bilinear_sample(ch, wr.u, wr.v)
        sampled.append(node)
        mask = mask * m
    depth_w, m = eng.bilinear_sample(frame_depth, wr.u, wr.v)
    mask = mask * m
    return ResampleResult(sampled, depth_w, eng.detach(mask))
