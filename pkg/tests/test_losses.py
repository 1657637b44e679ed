import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmkit import engine as eng
from dmkit import geometry as geo
from dmkit import losses as lo
from dmkit.engine import EPS_ABS, Tape, VectorField3, grad_check
from dmkit.geometry import Intrinsics, IntrinsicsNodes
from dmkit.losses import HyperParams, MotionNodes


def hyper():
    return HyperParams.defaults()


def field3(tape, arr):
    arr = np.asarray(arr, dtype=np.float64)
    return VectorField3(*[tape.constant(arr[:, :, c]) for c in range(3)])


def leaf3(tape, arr, prefix):
    return VectorField3(*[tape.leaf(f"{prefix}_{c}", arr[:, :, c]) for c in range(3)])


# ---------------------------------------------------------------------------
# group smoothness
# ---------------------------------------------------------------------------


def group_ref(t):
    """Hand evaluation: mean of the smoothed spatial gradient magnitude."""
    acc = 0.0
    for c in range(3):
        v = t[:, :, c]
        du = np.zeros_like(v)
        dv = np.zeros_like(v)
        du[:, :-1] = v[:, 1:] - v[:, :-1]
        dv[:-1, :] = v[1:, :] - v[:-1, :]
        acc += np.mean(np.sqrt(du ** 2 + dv ** 2 + EPS_ABS ** 2))
    return acc


def test_group_smoothness_constant_field():
    tape = Tape()
    t = field3(tape, np.full((4, 4, 3), 1.7))
    val = lo.group_smoothness(t).item()
    assert val == pytest.approx(3 * EPS_ABS, rel=1e-9)


def test_group_smoothness_step_field():
    t = np.zeros((4, 4, 3))
    t[:, 2:, 0] = 1.0  # one unit u-difference per row, in one column
    tape = Tape()
    val = lo.group_smoothness(field3(tape, t)).item()
    assert val == pytest.approx(group_ref(t), rel=1e-12)
    assert val == pytest.approx(0.25, abs=1e-4)


def test_group_smoothness_concentrates_on_boundaries():
    t = np.zeros((8, 8, 3))
    t[2:5, 2:6, 0] = 0.8  # rigid translating patch
    tape = Tape()
    val = lo.group_smoothness(field3(tape, t)).item()
    assert val == pytest.approx(group_ref(t), rel=1e-12)
    # interior pixels of the patch contribute only the smoothing floor
    v = t[:, :, 0]
    du = np.zeros_like(v)
    dv = np.zeros_like(v)
    du[:, :-1] = v[:, 1:] - v[:, :-1]
    dv[:-1, :] = v[1:, :] - v[:-1, :]
    integrand = np.sqrt(du ** 2 + dv ** 2 + EPS_ABS ** 2)
    assert integrand[3, 3] <= 2 * EPS_ABS
    assert integrand[2, 5] > 0.1


def test_group_smoothness_matches_reference_on_random_fields():
    rng = np.random.default_rng(0)
    t = rng.normal(size=(5, 7, 3))
    tape = Tape()
    assert lo.group_smoothness(field3(tape, t)).item() == pytest.approx(
        group_ref(t), rel=1e-12
    )


# ---------------------------------------------------------------------------
# sparsity
# ---------------------------------------------------------------------------


def sparsity_ref(t):
    """Independent evaluation through the normalized-ratio form."""
    acc = 0.0
    for c in range(3):
        a = np.abs(t[:, :, c])
        m = a.mean()
        if m == 0.0:
            continue
        acc += 2.0 * m * np.mean(np.sqrt(1.0 + a / m))
    return acc


def test_sparsity_zero_field_is_zero():
    tape = Tape()
    assert lo.sparsity_l_half(field3(tape, np.zeros((4, 4, 3)))).item() == 0.0


def test_sparsity_uniform_closed_form():
    t = np.zeros((4, 4, 3))
    t[:, :, 0] = 1.0
    tape = Tape()
    val = lo.sparsity_l_half(field3(tape, t)).item()
    assert val == pytest.approx(2.0 * np.sqrt(2.0), abs=1e-9)


def test_sparsity_concentrated_closed_form():
    t = np.zeros((4, 4, 3))
    t[1, 2, 0] = 16.0  # same mean magnitude as the uniform case
    tape = Tape()
    val = lo.sparsity_l_half(field3(tape, t)).item()
    expected = 2.0 * (15.0 + np.sqrt(17.0)) / 16.0
    assert val == pytest.approx(expected, abs=1e-9)
    assert val < 2.0 * np.sqrt(2.0)  # concentration is cheaper at equal mass


def test_sparsity_matches_reference_on_random_fields():
    rng = np.random.default_rng(1)
    t = rng.normal(size=(6, 5, 3))
    tape = Tape()
    assert lo.sparsity_l_half(field3(tape, t)).item() == pytest.approx(
        sparsity_ref(t), rel=1e-12
    )


@settings(max_examples=30, deadline=None)
@given(
    s=st.floats(min_value=0.1, max_value=10.0, allow_nan=False),
    seed=st.integers(min_value=0, max_value=2 ** 31),
)
def test_sparsity_is_one_homogeneous(s, seed):
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.5, 2.0, size=(4, 4, 3)) * rng.choice([-1.0, 1.0], size=(4, 4, 3))
    tape = Tape()
    base = lo.sparsity_l_half(field3(tape, t)).item()
    scaled = lo.sparsity_l_half(field3(tape, s * t)).item()
    assert scaled == pytest.approx(s * base, rel=1e-9)


def test_single_support_beats_uniform_at_equal_mass():
    rng = np.random.default_rng(2)
    for _ in range(5):
        h, w = rng.integers(2, 7, size=2)
        c = float(rng.uniform(0.2, 3.0))
        uniform = np.zeros((h, w, 3))
        uniform[:, :, 0] = c
        hot = np.zeros((h, w, 3))
        hot[rng.integers(h), rng.integers(w), 0] = c * h * w
        tape = Tape()
        lu = lo.sparsity_l_half(field3(tape, uniform)).item()
        lh = lo.sparsity_l_half(field3(tape, hot)).item()
        assert lh < lu


def test_motion_regularizer_weight_selection():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(4, 4, 3))
    tape = Tape()
    tf = field3(tape, t)
    h0 = hyper()
    h_sparse_only = HyperParams.from_dict({**h0.to_dict(), "alpha_mot": 0.0, "beta_mot": 1.0})
    h_both = HyperParams.from_dict({**h0.to_dict(), "alpha_mot": 1.0, "beta_mot": 1.0})
    sp = lo.sparsity_l_half(tf).item()
    gs = lo.group_smoothness(tf).item()
    assert lo.motion_regularizer(tf, h_sparse_only).item() == pytest.approx(sp, rel=1e-12)
    assert lo.motion_regularizer(tf, h_both).item() == pytest.approx(gs + sp, rel=1e-12)

    zero = field3(tape, np.zeros((4, 4, 3)))
    assert lo.motion_regularizer(zero, h_both).item() == pytest.approx(0.0, abs=1e-5)


# ---------------------------------------------------------------------------
# depth smoothness
# ---------------------------------------------------------------------------


def depth_smooth_ref(d, img, alpha):
    du = np.zeros_like(d)
    dv = np.zeros_like(d)
    du[:, :-1] = d[:, 1:] - d[:, :-1]
    dv[:-1, :] = d[1:, :] - d[:-1, :]
    su = np.zeros_like(d)
    sv = np.zeros_like(d)
    for c in range(img.shape[2]):
        gu = np.zeros_like(d)
        gv = np.zeros_like(d)
        gu[:, :-1] = img[:, 1:, c] - img[:, :-1, c]
        gv[:-1, :] = img[1:, :, c] - img[:-1, :, c]
        su += gu ** 2
        sv += gv ** 2
    term = np.sqrt(du ** 2 + EPS_ABS ** 2) * np.exp(-np.sqrt(su)) + np.sqrt(
        dv ** 2 + EPS_ABS ** 2
    ) * np.exp(-np.sqrt(sv))
    return alpha * term.mean()


def test_depth_smoothness_constant_disparity():
    tape = Tape()
    d = tape.constant(np.full((4, 4), 0.2))
    img = [tape.constant(np.random.default_rng(4).random((4, 4))) for _ in range(3)]
    val = lo.depth_smoothness(d, img, hyper()).item()
    assert val == pytest.approx(0.0, abs=1e-7)


def test_depth_smoothness_step_on_uniform_image():
    h = hyper()
    d = np.zeros((4, 4))
    d[:, 2:] = 1.0
    img = np.full((4, 4, 3), 0.5)
    tape = Tape()
    val = lo.depth_smoothness(
        tape.constant(d), [tape.constant(img[:, :, c]) for c in range(3)], h
    ).item()
    assert val == pytest.approx(depth_smooth_ref(d, img, h.alpha_dep), rel=1e-12)
    assert val == pytest.approx(0.25 * h.alpha_dep, rel=1e-4)


def test_depth_smoothness_suppressed_by_image_edge():
    h = hyper()
    d = np.zeros((4, 4))
    d[:, 2:] = 1.0
    flat = np.full((4, 4, 3), 0.5)
    edged = flat.copy()
    edged[:, 2:, 0] += 5.0  # gradient norm 5 exactly where the disparity steps
    tape = Tape()
    v_flat = lo.depth_smoothness(
        tape.constant(d), [tape.constant(flat[:, :, c]) for c in range(3)], h
    ).item()
    v_edge = lo.depth_smoothness(
        tape.constant(d), [tape.constant(edged[:, :, c]) for c in range(3)], h
    ).item()
    assert v_edge == pytest.approx(depth_smooth_ref(d, edged, h.alpha_dep), rel=1e-12)
    assert v_edge / v_flat == pytest.approx(np.exp(-5.0), rel=2e-2)


# ---------------------------------------------------------------------------
# cycle consistency
# ---------------------------------------------------------------------------


def rotation_nodes(tape, euler):
    return geo.euler_to_rotation(*[tape.constant(v) for v in euler])


def test_cycle_zero_for_exact_inverse():
    h = hyper()
    tape = Tape()
    euler = np.array([0.2, -0.1, 0.15])
    t_ego = np.array([0.3, -0.2, 0.6])
    rot = rotation_nodes(tape, euler)
    rot_inv = rotation_nodes(tape, geo.euler_from_rotation(geo.rotation_from_euler(euler).T))
    t = field3(tape, np.broadcast_to(t_ego, (4, 4, 3)).copy())
    t_inv_val = -(geo.rotation_from_euler(euler).T @ t_ego)
    t_inv = field3(tape, np.broadcast_to(t_inv_val, (4, 4, 3)).copy())
    mask = tape.constant(np.ones((4, 4)))
    cr, ct = lo.cycle_consistency(rot, t, rot_inv, t_inv, mask, h)
    assert cr.item() == pytest.approx(0.0, abs=1e-12)
    assert ct.item() == pytest.approx(0.0, abs=1e-12)


def test_cycle_degenerate_rotation_guarded():
    h = hyper()
    tape = Tape()
    rot = rotation_nodes(tape, np.zeros(3))
    t = field3(tape, np.random.default_rng(5).normal(size=(4, 4, 3)))
    t_inv = field3(tape, np.random.default_rng(6).normal(size=(4, 4, 3)))
    mask = tape.constant(np.ones((4, 4)))
    cr, _ = lo.cycle_consistency(rot, t, rot, t_inv, mask, h)
    assert cr.item() == pytest.approx(0.0, abs=1e-12)


def test_cycle_wrong_sign_translation_value():
    h = hyper()
    tape = Tape()
    rot = rotation_nodes(tape, np.zeros(3))
    t = field3(tape, np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3)).copy())
    t_inv = field3(tape, np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3)).copy())
    mask = tape.constant(np.ones((4, 4)))
    _, ct = lo.cycle_consistency(rot, t, rot, t_inv, mask, h)
    expected = h.beta_cyc * 4.0 / (2.0 + h.eps_norm)
    assert ct.item() == pytest.approx(expected, rel=1e-12)
    assert ct.item() == pytest.approx(2.0 * h.beta_cyc, rel=1e-5)


def test_cycle_masked_pixels_contribute_zero():
    h = hyper()
    tape = Tape()
    rot = rotation_nodes(tape, np.zeros(3))
    t = field3(tape, np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3)).copy())
    t_inv = field3(tape, np.broadcast_to([0.0, 0.0, 1.0], (4, 4, 3)).copy())
    mask = np.ones((4, 4))
    mask[:2] = 0.0
    _, ct = lo.cycle_consistency(rot, t, rot, t_inv, tape.constant(mask), h)
    expected = h.beta_cyc * (4.0 / (2.0 + h.eps_norm)) * 0.5
    assert ct.item() == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# ssim
# ---------------------------------------------------------------------------


def test_ssim_self_similarity():
    rng = np.random.default_rng(7)
    img = rng.random((6, 6, 3))
    tape = Tape()
    ch = lo.frames_to_nodes(tape, img)
    assert lo.ssim(ch, ch).item() == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_zero_vs_one():
    tape = Tape()
    a = [tape.constant(np.zeros((5, 5)))]
    b = [tape.constant(np.ones((5, 5)))]
    expected = lo.SSIM_C1 / (1.0 + lo.SSIM_C1)
    assert lo.ssim(a, b).item() == pytest.approx(expected, rel=1e-9)


def test_ssim_mean_shift_touches_only_luminance():
    rng = np.random.default_rng(8)
    base = 0.2 + 0.5 * rng.random((7, 7))
    shifted = base + 0.1
    tape = Tape()
    got = lo.ssim([tape.constant(base)], [tape.constant(shifted)]).item()

    def box(x):
        out = np.zeros((5, 5))
        for i in range(5):
            for j in range(5):
                out[i, j] = x[i:i + 3, j:j + 3].mean()
        return out

    mu_a, mu_b = box(base), box(shifted)
    # identical centered moments: the structure factor is exactly 1
    expected = np.mean((2 * mu_a * mu_b + lo.SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + lo.SSIM_C1))
    assert got == pytest.approx(expected, rel=1e-9)
    assert got < 1.0


# ---------------------------------------------------------------------------
# photometric
# ---------------------------------------------------------------------------


def test_photometric_identical_frames_identity_warp_is_exactly_zero():
    rng = np.random.default_rng(9)
    img = rng.random((6, 6, 3))
    tape = Tape()
    ch = lo.frames_to_nodes(tape, img)
    depth = tape.constant(np.full((6, 6), 3.0))
    ones = tape.constant(np.ones((6, 6)))
    l1, ss = lo.photometric_loss(ch, ch, depth, depth, ones, hyper())
    assert l1.item() == 0.0
    assert ss.item() == 0.0


def test_photometric_half_unit_channel_offset():
    h = hyper()
    img = np.full((4, 4, 3), 0.25)
    shifted = img.copy()
    shifted[:, :, 1] += 0.5
    tape = Tape()
    a = lo.frames_to_nodes(tape, img)
    b = lo.frames_to_nodes(tape, shifted)
    depth = tape.constant(np.full((4, 4), 2.0))
    ones = tape.constant(np.ones((4, 4)))
    l1, _ = lo.photometric_loss(a, b, depth, depth, ones, h)
    assert l1.item() == pytest.approx(h.alpha_rgb * 0.5, rel=1e-12)


def test_photometric_fully_occluded_is_free():
    h = hyper()
    rng = np.random.default_rng(10)
    a_img = rng.random((4, 4, 3))
    b_img = rng.random((4, 4, 3))
    tape = Tape()
    a = lo.frames_to_nodes(tape, a_img)
    b = lo.frames_to_nodes(tape, b_img)
    z_prime = tape.constant(np.full((4, 4), 5.0))
    d_warp = tape.constant(np.full((4, 4), 1.0))  # z' > D_warp: occluded
    ones = tape.constant(np.ones((4, 4)))
    l1, _ = lo.photometric_loss(a, b, z_prime, d_warp, ones, h)
    assert l1.item() == 0.0


# ---------------------------------------------------------------------------
# pair loss
# ---------------------------------------------------------------------------


def make_motion(tape, prefix, euler=(0, 0, 0), t_ego=(0, 0, 0), t_res=None, shape=(6, 8)):
    if t_res is None:
        t_res = np.zeros(shape + (3,))
    return MotionNodes(
        euler=tuple(tape.constant(float(v)) for v in euler),
        t_ego=tuple(tape.constant(float(v)) for v in t_ego),
        t_res=field3(tape, t_res),
    )


def build_pair(tape, ia, ib, da, db, mot_ab, mot_ba, k, h):
    return lo.pair_loss(
        lo.frames_to_nodes(tape, ia),
        lo.frames_to_nodes(tape, ib),
        tape.constant(da),
        tape.constant(db),
        mot_ab,
        mot_ba,
        IntrinsicsNodes.lift(tape, k),
        h,
    )


def test_pair_loss_static_identical_frames():
    rng = np.random.default_rng(11)
    h = hyper()
    img = rng.random((6, 8, 3))
    depth = np.full((6, 8), 4.0)
    k = Intrinsics(20.0, 20.0, 4.0, 3.0)
    tape = Tape()
    bd = build_pair(
        tape, img, img, depth, depth,
        make_motion(tape, "ab"), make_motion(tape, "ba"), k, h,
    )
    assert bd.photo_l1.item() == pytest.approx(0.0, abs=1e-12)
    assert bd.photo_ssim.item() == pytest.approx(0.0, abs=1e-12)
    assert bd.cyc_rot.item() == pytest.approx(0.0, abs=1e-12)
    assert bd.cyc_trans.item() == pytest.approx(0.0, abs=1e-12)
    assert bd.group_smooth.item() == pytest.approx(0.0, abs=1e-5)
    assert bd.sparsity.item() == pytest.approx(0.0, abs=1e-12)
    assert bd.total.item() == pytest.approx(bd.depth_smooth.item(), abs=1e-5)


def test_pair_loss_swap_symmetry_and_weighted_sum():
    rng = np.random.default_rng(12)
    h = hyper()
    ia = rng.random((6, 8, 3))
    ib = rng.random((6, 8, 3))
    da = 3.0 + rng.random((6, 8))
    db = 3.0 + rng.random((6, 8))
    res_ab = 0.1 * rng.normal(size=(6, 8, 3))
    res_ba = 0.1 * rng.normal(size=(6, 8, 3))
    k = Intrinsics(20.0, 21.0, 4.2, 3.1)

    def total_of(x1, x2, d1, d2, r1, r2, e1, e2, g1, g2):
        tape = Tape()
        m1 = make_motion(tape, "ab", euler=e1, t_ego=g1, t_res=r1)
        m2 = make_motion(tape, "ba", euler=e2, t_ego=g2, t_res=r2)
        bd = build_pair(tape, x1, x2, d1, d2, m1, m2, k, h)
        comps = bd.to_floats()
        recomposed = (
            h.alpha_mot * comps["group_smooth"]
            + h.beta_mot * comps["sparsity"]
            + comps["depth_smooth"]
            + comps["cyc_rot"]
            + comps["cyc_trans"]
            + comps["photo_l1"]
            + comps["photo_ssim"]
        )
        assert comps["total"] == pytest.approx(recomposed, rel=1e-12)
        for name, v in comps.items():
            assert v >= 0.0, name
        return comps["total"]

    e1 = (0.01, -0.02, 0.005)
    e2 = (-0.01, 0.02, -0.005)
    g1 = (0.05, -0.02, 0.1)
    g2 = (-0.05, 0.02, -0.1)
    fwd = total_of(ia, ib, da, db, res_ab, res_ba, e1, e2, g1, g2)
    rev = total_of(ib, ia, db, da, res_ba, res_ab, e2, e1, g2, g1)
    assert fwd == pytest.approx(rev, rel=1e-14)


# ---------------------------------------------------------------------------
# gradient checks (small smoke versions; the acceptance suite runs 3 seeds)
# ---------------------------------------------------------------------------


def test_grad_check_group_and_sparsity():
    rng = np.random.default_rng(13)
    vals = rng.uniform(0.3, 1.5, size=(6, 6, 3)) * rng.choice([-1, 1], size=(6, 6, 3))

    def build_group(tape, leaves):
        t = VectorField3(leaves["x"], leaves["y"], leaves["z"])
        return lo.group_smoothness(t)

    def build_sparse(tape, leaves):
        t = VectorField3(leaves["x"], leaves["y"], leaves["z"])
        return lo.sparsity_l_half(t)

    leaf_vals = {"x": vals[:, :, 0], "y": vals[:, :, 1], "z": vals[:, :, 2]}
    assert grad_check(build_group, leaf_vals, samples_per_leaf=12).max_rel_err < 1e-3
    assert grad_check(build_sparse, leaf_vals, samples_per_leaf=12).max_rel_err < 1e-3


def test_grad_check_depth_smoothness_and_cycle():
    rng = np.random.default_rng(14)
    img = rng.random((6, 6, 3))
    h = hyper()

    def build_ds(tape, leaves):
        return lo.depth_smoothness(leaves["d"], lo.frames_to_nodes(tape, img), h)

    report = grad_check(build_ds, {"d": 0.5 + rng.random((6, 6))}, samples_per_leaf=12)
    assert report.max_rel_err < 1e-3

    res = 0.2 * rng.normal(size=(6, 6, 3))
    res_inv = 0.2 * rng.normal(size=(6, 6, 3))

    def build_cyc(tape, leaves):
        rot = geo.euler_to_rotation(leaves["rx"], leaves["ry"], leaves["rz"])
        rot_inv = geo.euler_to_rotation(leaves["sx"], leaves["sy"], leaves["sz"])
        t = VectorField3(leaves["tx"], leaves["ty"], leaves["tz"])
        t_inv = VectorField3(*[tape.constant(res_inv[:, :, c]) for c in range(3)])
        mask = tape.constant(np.ones((6, 6)))
        cr, ct = lo.cycle_consistency(rot, t, rot_inv, t_inv, mask, h)
        return cr + ct

    report = grad_check(
        build_cyc,
        {
            "rx": 0.1, "ry": -0.05, "rz": 0.2,
            "sx": -0.11, "sy": 0.06, "sz": -0.19,
            "tx": res[:, :, 0], "ty": res[:, :, 1], "tz": res[:, :, 2],
        },
        samples_per_leaf=10,
    )
    assert report.max_rel_err < 1e-3


def test_grad_check_photometric_through_warp():
    rng = np.random.default_rng(15)
    h = hyper()
    ia = rng.random((8, 8, 3))
    ib = rng.random((8, 8, 3))
    k = Intrinsics(10.0, 10.0, 3.6, 3.7)

    def build(tape, leaves):
        depth = eng.softplus(leaves["logits"]) + 1.5
        depth_b = tape.constant(2.0 + rng.random((8, 8)) * 0.0 + 2.2)
        kn = IntrinsicsNodes.lift(tape, k)
        rot = geo.euler_to_rotation(leaves["rx"], leaves["ry"], leaves["rz"])
        t = VectorField3(
            leaves["tx"] + tape.constant(np.zeros((8, 8))),
            leaves["ty"] + tape.constant(np.zeros((8, 8))),
            leaves["tz"] + tape.constant(np.zeros((8, 8))),
        )
        wr = geo.warp(depth, kn, rot, t)
        rs = geo.resample(lo.frames_to_nodes(tape, ib), depth_b, wr)
        l1, ss = lo.photometric_loss(
            lo.frames_to_nodes(tape, ia), rs.channels, wr.z, rs.depth, rs.mask, h
        )
        return l1 + ss

    # small FD step keeps the probes inside one bilinear cell
    report = grad_check(
        build,
        {
            "logits": rng.normal(size=(8, 8)) * 0.1 + 1.2,
            "rx": 0.017, "ry": -0.013, "rz": 0.009,
            "tx": 0.041, "ty": -0.037, "tz": 0.053,
        },
        eps_fd=1e-5,
        samples_per_leaf=12,
        seed=3,
    )
    assert report.max_rel_err < 5e-3, report.to_dict()


def test_hyperparams_defaults_and_validation():
    h = HyperParams.defaults()
    assert h.alpha_rgb > 0 and h.eps_norm > 0
    d = h.to_dict()
    assert d["schema"] == "dmkit.hyper/1"
    assert HyperParams.from_dict(d) == h
    with pytest.raises(ValueError):
        HyperParams.from_dict({**d, "alpha_mot": -1.0})
    with pytest.raises(ValueError):
        HyperParams.from_dict({**d, "eps_norm": 0.0})
