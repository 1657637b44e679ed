"""Procedural frame-pair generator with exact ground truth.

The world is a fronto-parallel textured background plane plus rectangular
fronto-parallel patches ("objects") that each translate rigidly between
the two frames; the camera moves by a rigid ego-motion. Both frames are
rendered analytically by ray-casting against continuous value-noise
textures, so frame colors, depths, residual translation fields and
occlusion maps are exact: the only error anywhere downstream is bilinear
resampling.

Conventions match the warp: a scene point P seen in frame a appears in
frame b at R P + T_ego (+ t_obj for object points), with R, T_ego the
ego-motion and t_obj the object's translation. The ground-truth residual
field is therefore exactly t_obj on the object's pixels and zero
elsewhere, and exactly -R^T t_obj on the reverse direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import losses as lo
from .engine import Tape, VectorField3
from .geometry import Intrinsics, RigidMotion


class SceneSpecError(ValueError):
    """A scene description violates its invariants; message carries the
    offending field path."""


class SceneConsistencyError(RuntimeError):
    """Generator and warp disagree beyond the resampling error budget."""


# Maximum photometric residual the generator tolerates when re-rendering
# one frame from the other through the differentiable warp (sigma = 0).
SELF_CHECK_BUDGET = 2e-2

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xC2B2AE3D27D4EB4F)
_MIX3 = np.uint64(0xD6E8FEB86659FD93)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1); splitmix64-style mixing."""
    h = (
        ix.astype(np.int64).astype(np.uint64) * _MIX1
        ^ iy.astype(np.int64).astype(np.uint64) * _MIX2
        ^ np.uint64(salt & 0xFFFFFFFFFFFFFFFF) * _MIX3
    )
    h ^= h >> np.uint64(30)
    h *= _M1
    h ^= h >> np.uint64(27)
    h *= _M2
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 2 ** 53)


def _value_noise(x: np.ndarray, y: np.ndarray, salt: int) -> np.ndarray:
    """Smoothstep-interpolated value noise at continuous coordinates."""
    x0 = np.floor(x)
    y0 = np.floor(y)
    tx = x - x0
    ty = y - y0
    sx = tx * tx * (3.0 - 2.0 * tx)
    sy = ty * ty * (3.0 - 2.0 * ty)
    i0 = x0.astype(np.int64)
    j0 = y0.astype(np.int64)
    v00 = _hash01(i0, j0, salt)
    v10 = _hash01(i0 + 1, j0, salt)
    v01 = _hash01(i0, j0 + 1, salt)
    v11 = _hash01(i0 + 1, j0 + 1, salt)
    top = v00 * (1.0 - sx) + v10 * sx
    bot = v01 * (1.0 - sx) + v11 * sx
    return top * (1.0 - sy) + bot * sy


class NoiseTexture:
    """Continuous RGB value-noise texture over plane coordinates.

    Octave wavelengths are chosen per surface so image-space features sit
    around 16/8/4 pixels: enough high frequency to make the photometric
    loss informative, low enough curvature that bilinear resampling stays
    inside the generator's self-check budget.
    """

    AMPS = (0.55, 0.32, 0.13)
    LOW, HIGH = 0.06, 0.94

    def __init__(self, salt: int, base_freq: float):
        self.salt = salt
        self.freqs = tuple(base_freq * 2 ** o for o in range(len(self.AMPS)))

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape + (3,))
        total = sum(self.AMPS)
        for c in range(3):
            acc = np.zeros_like(x)
            for o, (amp, f) in enumerate(zip(self.AMPS, self.freqs)):
                salt = self.salt * 1000003 + c * 101 + o
                acc += amp * _value_noise(x * f + 0.37 * o, y * f - 0.59 * o, salt)
            out[:, :, c] = acc / total
        return self.LOW + (self.HIGH - self.LOW) * out


@dataclass
class ObjectSpec:
    """Rectangular patch in frame a: [u0, v0, w, h] in pixels, a constant
    depth, and its 3D translation between the frames (scene units)."""

    rect: tuple[float, float, float, float]
    depth: float
    translation: np.ndarray

    def __post_init__(self):
        self.rect = tuple(float(v) for v in self.rect)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)


@dataclass
class SceneSpec:
    width: int
    height: int
    background_depth_range: tuple[float, float]
    texture_seed: int
    objects: list[ObjectSpec] = field(default_factory=list)
    ego: RigidMotion = field(default_factory=RigidMotion.identity)
    noise_sigma: float = 0.0
    intrinsics: Intrinsics | None = None

    def resolved_intrinsics(self) -> Intrinsics:
        if self.intrinsics is not None:
            return self.intrinsics
        return Intrinsics(
            1.2 * self.width, 1.2 * self.width, self.width / 2.0, self.height / 2.0
        )

    def validate(self) -> "SceneSpec":
        if self.width < 8 or self.height < 8:
            raise SceneSpecError(f"resolution: must be at least 8x8, got {self.width}x{self.height}")
        lo_d, hi_d = self.background_depth_range
        if not (0 < lo_d <= hi_d):
            raise SceneSpecError(f"background.depth_range: invalid range ({lo_d}, {hi_d})")
        if self.noise_sigma < 0:
            raise SceneSpecError(f"noise_sigma: must be nonnegative, got {self.noise_sigma}")
        self.resolved_intrinsics().validate(self.width, self.height)
        for i, obj in enumerate(self.objects):
            u0, v0, w, h = obj.rect
            if w <= 0 or h <= 0:
                raise SceneSpecError(f"objects[{i}].rect: empty rectangle {obj.rect}")
            if u0 < 0 or v0 < 0 or u0 + w > self.width - 1 or v0 + h > self.height - 1:
                raise SceneSpecError(f"objects[{i}].rect: leaves frame a: {obj.rect}")
            if obj.depth <= 0:
                raise SceneSpecError(f"objects[{i}].depth: must be positive, got {obj.depth}")
            if obj.depth >= lo_d:
                raise SceneSpecError(
                    f"objects[{i}].depth: {obj.depth} not in front of background range {self.background_depth_range}"
                )
        return self

    def to_dict(self) -> dict:
        d = {
            "schema": "dmkit.scene/1",
            "width": self.width,
            "height": self.height,
            "background": {
                "depth_range": list(self.background_depth_range),
                "texture_seed": self.texture_seed,
            },
            "objects": [
                {
                    "rect": list(o.rect),
                    "depth": o.depth,
                    "translation": o.translation.tolist(),
                }
                for o in self.objects
            ],
            "ego": self.ego.to_dict(),
            "noise_sigma": self.noise_sigma,
        }
        if self.intrinsics is not None:
            k = self.intrinsics
            d["intrinsics"] = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            bg = d["background"]
            spec = cls(
                width=int(d["width"]),
                height=int(d["height"]),
                background_depth_range=tuple(float(v) for v in bg["depth_range"]),
                texture_seed=int(bg["texture_seed"]),
                objects=[
                    ObjectSpec(o["rect"], float(o["depth"]), o["translation"])
                    for o in d.get("objects", [])
                ],
                ego=RigidMotion.from_dict(d["ego"]) if "ego" in d else RigidMotion.identity(),
                noise_sigma=float(d.get("noise_sigma", 0.0)),
                intrinsics=(
                    Intrinsics(**{k: float(v) for k, v in d["intrinsics"].items()})
                    if "intrinsics" in d
                    else None
                ),
            )
        except (KeyError, TypeError, IndexError) as e:
            raise SceneSpecError(f"malformed scene spec: missing/invalid field {e}") from e
        return spec.validate()


@dataclass
class SceneSample:
    """A rendered pair with exact ground truth for every predicted quantity."""

    frame_a: np.ndarray  # (H, W, 3) in [0, 1]
    frame_b: np.ndarray
    depth_a: np.ndarray  # (H, W), scene units
    depth_b: np.ndarray
    residual_ab: np.ndarray  # (H, W, 3): per-pixel object translation, a->b
    residual_ba: np.ndarray
    ego_ab: RigidMotion
    ego_ba: RigidMotion
    mask_a: np.ndarray  # (H, W) uint8 object ids, 0 = background
    mask_b: np.ndarray
    valid_ab: np.ndarray  # (H, W) bool: a-content photometrically testable in b
    valid_ba: np.ndarray
    intrinsics: Intrinsics
    spec: SceneSpec


class _World:
    """Resolved surfaces of one scene: geometry plus per-surface textures."""

    def __init__(self, spec: SceneSpec, bg_depth: float):
        self.spec = spec
        self.k = spec.resolved_intrinsics()
        self.bg_depth = bg_depth
        self.rot = spec.ego.rotation()
        self.t_ego = spec.ego.translation
        # surface 0 = background; objects are 1-based ids
        k = self.k
        self.surfaces = [
            {
                "depth": bg_depth,
                "move": self.t_ego,
                "tex": NoiseTexture(spec.texture_seed * 31 + 1, self._freq(bg_depth)),
                "bounds": None,
            }
        ]
        for i, obj in enumerate(spec.objects):
            u0, v0, w, h = obj.rect
            z = obj.depth
            bounds = (
                (u0 - k.cx) / k.fx * z,
                (u0 + w - k.cx) / k.fx * z,
                (v0 - k.cy) / k.fy * z,
                (v0 + h - k.cy) / k.fy * z,
            )
            self.surfaces.append(
                {
                    "depth": z,
                    "move": self.t_ego + obj.translation,
                    "tex": NoiseTexture(spec.texture_seed * 31 + 17 * (i + 2), self._freq(z)),
                    "bounds": bounds,
                }
            )

    def _freq(self, depth: float) -> float:
        # base wavelength ~16 px at this surface's depth
        return self.k.fx / (depth * 16.0)

    def cast_static(self, u: np.ndarray, v: np.ndarray):
        """Frame-a view: nearest surface along each (u, v) ray."""
        k = self.k
        rx = (u - k.cx) / k.fx
        ry = (v - k.cy) / k.fy
        depth = np.full(u.shape, self.bg_depth)
        ids = np.zeros(u.shape, dtype=np.int64)
        for sid, s in enumerate(self.surfaces[1:], start=1):
            x_lo, x_hi, y_lo, y_hi = s["bounds"]
            x = rx * s["depth"]
            y = ry * s["depth"]
            inside = (x >= x_lo) & (x <= x_hi) & (y >= y_lo) & (y <= y_hi)
            take = inside & (s["depth"] < depth)
            depth[take] = s["depth"]
            ids[take] = sid
        return ids, depth, rx * depth, ry * depth

    def cast_moved(self, u: np.ndarray, v: np.ndarray):
        """Frame-b view at continuous coordinates.

        Every surface plane z = Z in frame-a coordinates maps to
        {R P + T : P_z = Z}; a frame-b ray s*r hits it at
        s = (Z + (R^T T)_z) / (R^T r)_z, and the pre-motion point is
        P = R^T (s r - T). Nearest positive hit wins.
        """
        k = self.k
        r = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1)
        rtr_z = r @ self.rot[:, 2]  # (R^T r)_z
        depth = np.full(u.shape, np.inf)
        ids = np.full(u.shape, -1, dtype=np.int64)
        hit_x = np.zeros(u.shape)
        hit_y = np.zeros(u.shape)
        for sid, s in enumerate(self.surfaces):
            t = s["move"]
            s_val = (s["depth"] + self.rot[:, 2] @ t) / rtr_z
            pb = r * s_val[..., None]
            pa = (pb - t) @ self.rot  # row-vector form of R^T (pb - t)
            if s["bounds"] is None:
                inside = np.ones(u.shape, dtype=bool)
            else:
                x_lo, x_hi, y_lo, y_hi = s["bounds"]
                inside = (
                    (pa[..., 0] >= x_lo)
                    & (pa[..., 0] <= x_hi)
                    & (pa[..., 1] >= y_lo)
                    & (pa[..., 1] <= y_hi)
                )
            take = inside & (s_val > 0) & (s_val < depth)
            depth[take] = s_val[take]
            ids[take] = sid
            hit_x[take] = pa[..., 0][take]
            hit_y[take] = pa[..., 1][take]
        return ids, depth, hit_x, hit_y

    def shade(self, ids: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        img = np.zeros(ids.shape + (3,))
        for sid, s in enumerate(self.surfaces):
            sel = ids == sid
            if np.any(sel):
                img[sel] = s["tex"](x[sel][None, :], y[sel][None, :])[0]
        return img

    def project(self, p: np.ndarray):
        """Project camera points (..., 3) to pixel coordinates + depth."""
        k = self.k
        z = p[..., 2]
        safe = np.maximum(z, geo.Z_MIN)
        return (
            k.fx * p[..., 0] / safe + k.cx,
            k.fy * p[..., 1] / safe + k.cy,
            z,
        )


def render_pair(spec: SceneSpec, seed: int) -> SceneSample:
    """Render the frame pair and every ground-truth quantity for ``spec``.

    Deterministic: identical (spec, seed) gives bit-identical output. The
    background depth is drawn from the spec's range; pixel noise is added
    last and never touches the geometric ground truth.
    """
    spec.validate()
    rng = np.random.default_rng([int(seed) & 0x7FFFFFFF, spec.texture_seed & 0x7FFFFFFF])
    lo_d, hi_d = spec.background_depth_range
    bg_depth = float(rng.uniform(lo_d, hi_d))
    world = _World(spec, bg_depth)
    h, w = spec.height, spec.width
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    ids_a, depth_a, xa, ya = world.cast_static(uu, vv)
    frame_a = world.shade(ids_a, xa, ya)
    ids_b, depth_b, xb, yb = world.cast_moved(uu, vv)
    frame_b = world.shade(ids_b, xb, yb)

    rot = world.rot
    t_ego = world.t_ego
    ego_ba = spec.ego.inverse()

    residual_ab = np.zeros((h, w, 3))
    residual_ba = np.zeros((h, w, 3))
    for i, obj in enumerate(spec.objects, start=1):
        residual_ab[ids_a == i] = obj.translation
        residual_ba[ids_b == i] = -(rot.T @ obj.translation)

    # objects must stay renderable in frame b
    for i, obj in enumerate(spec.objects, start=1):
        if not np.any(ids_b == i):
            raise SceneSpecError(f"objects[{i - 1}].translation: object leaves frame b")

    valid_ab = _visibility(world, ids_a, depth_a, xa, ya, ids_b, forward=True)
    valid_ba = _visibility(world, ids_b, depth_b, xb, yb, ids_a, forward=False)

    if spec.noise_sigma > 0:
        frame_a = frame_a + rng.normal(0.0, spec.noise_sigma, size=frame_a.shape)
        frame_b = frame_b + rng.normal(0.0, spec.noise_sigma, size=frame_b.shape)
    frame_a = np.clip(frame_a, 0.0, 1.0)
    frame_b = np.clip(frame_b, 0.0, 1.0)

    return SceneSample(
        frame_a=frame_a,
        frame_b=frame_b,
        depth_a=depth_a,
        depth_b=depth_b,
        residual_ab=residual_ab,
        residual_ba=residual_ba,
        ego_ab=RigidMotion(spec.ego.euler.copy(), spec.ego.translation.copy()),
        ego_ba=ego_ba,
        mask_a=(ids_a > 0).astype(np.uint8) * np.maximum(ids_a, 0).astype(np.uint8),
        mask_b=(ids_b > 0).astype(np.uint8) * np.maximum(ids_b, 0).astype(np.uint8),
        valid_ab=valid_ab,
        valid_ba=valid_ba,
        intrinsics=world.k,
        spec=spec,
    )


def _visibility(world, ids_src, depth_src, x_src, y_src, ids_dst, forward: bool):
    """Which source pixels can be photometrically tested in the other frame.

    A pixel survives if its content lands inside the other image, is not
    occluded there (exact continuous depth test), and its bilinear support
    touches only its own surface so resampling never mixes surfaces.
    """
    h, w = ids_src.shape
    p = np.stack([x_src, y_src, depth_src], axis=-1)
    if forward:
        moved = np.zeros_like(p)
        for sid, s in enumerate(world.surfaces):
            sel = ids_src == sid
            moved[sel] = p[sel] @ world.rot.T + s["move"]
    else:
        moved = np.zeros_like(p)
        for sid, s in enumerate(world.surfaces):
            sel = ids_src == sid
            moved[sel] = (p[sel] - s["move"]) @ world.rot
    u2, v2, z2 = world.project(moved)
    in_bounds = (u2 >= 0) & (u2 <= w - 1) & (v2 >= 0) & (v2 <= h - 1) & (z2 > geo.Z_MIN)

    u2c = np.clip(u2, 0, w - 1)
    v2c = np.clip(v2, 0, h - 1)
    if forward:
        ids_hit, depth_hit, _, _ = world.cast_moved(u2c, v2c)
    else:
        ids_hit, depth_hit, _, _ = world.cast_static(u2c, v2c)
    unoccluded = depth_hit >= z2 * (1.0 - 1e-9) - 1e-9
    same_surface = ids_hit == ids_src

    x0 = np.clip(np.floor(u2c).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(v2c).astype(np.int64), 0, h - 2)
    pure = (
        (ids_dst[y0, x0] == ids_src)
        & (ids_dst[y0, x0 + 1] == ids_src)
        & (ids_dst[y0 + 1, x0] == ids_src)
        & (ids_dst[y0 + 1, x0 + 1] == ids_src)
    )
    return in_bounds & unoccluded & same_surface & pure


def self_check(sample: SceneSample, k: Intrinsics | None = None) -> float:
    """Warp frame a by ground truth and compare against frame b.

    Returns the max per-pixel absolute color difference over valid,
    unmasked pixels; raises SceneConsistencyError above the resampling
    budget. Meaningful for sigma = 0 renders only.
    """
    k = k or sample.intrinsics
    tape = Tape()
    kn = geo.IntrinsicsNodes.lift(tape, k)
    rot = geo.euler_to_rotation(*[tape.constant(v) for v in sample.ego_ab.euler])
    t_total = VectorField3(
        *[tape.constant(sample.residual_ab[:, :, c] + sample.ego_ab.translation[c]) for c in range(3)]
    )
    wr = geo.warp(tape.constant(sample.depth_a), kn, rot, t_total)
    rs = geo.resample(
        lo.frames_to_nodes(tape, sample.frame_b), tape.constant(sample.depth_b), wr
    )
    mask = (rs.mask.value > 0) & sample.valid_ab
    if not np.any(mask):
        raise SceneConsistencyError("no valid pixels to check")
    residual = 0.0
    for c in range(3):
        diff = np.abs(sample.frame_a[:, :, c] - rs.channels[c].value)
        residual = max(residual, float(diff[mask].max()))
    if residual > SELF_CHECK_BUDGET:
        raise SceneConsistencyError(
            f"ground-truth warp residual {residual:.4f} exceeds budget {SELF_CHECK_BUDGET}"
        )
    return residual


def random_scene_spec(seed: int, width: int = 64, height: int = 48, moving_objects: int | None = None) -> SceneSpec:
    """A randomized but always-valid scene around the demo geometry.

    Used by the generator consistency suite; object count, placement,
    depths and motions vary with the seed while staying inside frame
    bounds under the sampled ego-motion.
    """
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(0, 3)) if moving_objects is None else moving_objects
    for attempt in range(64):
        objects = []
        for _ in range(n_obj):
            ow = float(rng.uniform(0.18, 0.3) * width)
            oh = float(rng.uniform(0.2, 0.35) * height)
            u0 = float(rng.uniform(0.15 * width, 0.8 * width - ow))
            v0 = float(rng.uniform(0.15 * height, 0.8 * height - oh))
            depth = float(rng.uniform(2.8, 4.5))
            trans = rng.uniform(-0.1, 0.1, size=3) * np.array([1.0, 0.6, 0.8])
            objects.append(ObjectSpec((u0, v0, ow, oh), depth, trans))
        ego = RigidMotion(
            rng.uniform(-0.02, 0.02, size=3),
            rng.uniform(-0.25, 0.25, size=3) * np.array([1.0, 0.5, 1.2]),
        )
        spec = SceneSpec(
            width=width,
            height=height,
            background_depth_range=(6.5, 9.0),
            texture_seed=int(rng.integers(0, 2 ** 31)),
            objects=objects,
            ego=ego,
            noise_sigma=0.0,
        )
        try:
            spec.validate()
            render_pair(spec, seed=seed + attempt)  # also exercises frame-b bounds
            return spec
        except SceneSpecError:
            continue
    raise SceneSpecError("could not sample a valid scene spec")
