import numpy as np
import pytest

from conftest import make_rig
from semstereo import synthdata as sd
from semstereo.errors import DegeneracyError, OutOfBoundsError
from semstereo.geometry import WorldBox, ground_intersect_arrays
from semstereo.rectification import (
    Homography,
    fit_homography,
    fit_rectifying_transforms,
    make_truth_disparity,
    occlusion_mask,
    reproject_truth,
    tile_world_box,
    virtual_correspondences,
    warp_image,
)


def rig_pair(azL=100.0, offL=12.0, azR=250.0, offR=18.0, jitter=0.0, altitude=500e3):
    _, camL, box = make_rig(azL, offL, jitter=jitter, seed=1, altitude=altitude)
    _, camR, _ = make_rig(azR, offR, jitter=jitter, seed=2, altitude=altitude)
    return camL, camR, box


def test_correspondence_count_and_order():
    camL, camR, box = rig_pair()
    corrs = virtual_correspondences(camL, camR, box, (3, 3, 2))
    assert len(corrs) == 18
    assert corrs[0].world.x < corrs[1].world.x
    assert corrs[0].world.z < corrs[9].world.z
    l, s = camL.project(*corrs[4].world)
    assert (l, s) == tuple(corrs[4].ipL)


def test_correspondences_need_two_heights():
    camL, camR, box = rig_pair()
    with pytest.raises(DegeneracyError):
        virtual_correspondences(camL, camR, box, (5, 5, 1))


def test_correspondences_outside_validity_name_node():
    camL, camR, _ = rig_pair()
    far = WorldBox(-1e5, 1e5, -10, 10, 0, 10)
    with pytest.raises(OutOfBoundsError, match="ix=0"):
        virtual_correspondences(camL, camR, far, (3, 3, 2))


def test_planar_correspondences_related_by_homography():
    camL, camR, box = rig_pair()
    flat = WorldBox(box.xmin, box.xmax, box.ymin, box.ymax, 5.0, 5.0)
    pts = flat.grid(6, 6, 1).reshape(-1, 3)
    lL, sL = camL.project(*pts.T)
    lR, sR = camR.project(*pts.T)
    H = fit_homography(np.c_[lL, sL], np.c_[lR, sR])
    pl, ps = H.apply(lL, sL)
    assert np.max(np.hypot(pl - lR, ps - sR)) < 1e-6


def test_degree1_holdout_parallax():
    for azL, offL, azR, offR in [(100, 12, 250, 18), (0, 5, 180, 30), (45, 20, 135, 22)]:
        camL, camR, box = rig_pair(azL, offL, azR, offR)
        rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512))
        assert rect.holdout_rms < 0.1
        assert rect.holdout_rms <= rect.holdout_max


def test_jittered_holdout_parallax():
    camL, camR, box = rig_pair(jitter=1e-3)
    rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512))
    assert rect.holdout_rms < 0.3


def test_row_aligned_pair_gives_translations():
    # east and west looking cameras already have horizontal epipolar lines
    camL, camR, box = rig_pair(90.0, 15.0, 270.0, 15.0)
    rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512))
    for h in rect:
        assert np.allclose(h.matrix[:2, :2], np.eye(2), atol=1e-6)
        assert np.allclose(h.matrix[2], [0, 0, 1], atol=1e-12)


def test_single_height_rejected():
    camL, camR, box = rig_pair()
    corrs = virtual_correspondences(camL, camR, box, (4, 4, 2))
    flat = [c for c in corrs if c.world.z == box.zmin]
    with pytest.raises(DegeneracyError):
        fit_rectifying_transforms(flat, (512, 512))


def test_zero_baseline_rejected():
    camL, _, box = rig_pair()
    with pytest.raises(DegeneracyError):
        fit_rectifying_transforms(virtual_correspondences(camL, camL, box), (512, 512))


def test_homography_invertibility_invariant():
    with pytest.raises(DegeneracyError):
        Homography(np.zeros((3, 3)))
    h = Homography(2.0 * np.array([[1.0, 0.1, 3.0], [0.0, 1.0, -2.0], [0.0, 0.0, 1.0]]))
    assert h.matrix[2, 2] == 1.0


# -- warping ------------------------------------------------------------------


def test_warp_identity_bit_identical():
    img = np.random.default_rng(0).random((40, 50))
    assert np.array_equal(warp_image(img, Homography.identity(), img.shape), img)
    cls = np.random.default_rng(0).choice([2, 5, 6, 9], (40, 50)).astype(np.uint8)
    assert np.array_equal(warp_image(cls, Homography.identity(), cls.shape), cls)


def test_warp_integer_translation_exact():
    img = np.random.default_rng(1).random((30, 30))
    h = Homography(np.array([[1.0, 0.0, 3.0], [0.0, 1.0, -2.0], [0.0, 0.0, 1.0]]))
    out = warp_image(img, h, img.shape)
    assert np.array_equal(out[0:28, 3:30], img[2:30, 0:27])
    assert np.isnan(out[:, :3]).all() and np.isnan(out[28:]).all()
    cls = warp_image(np.full((30, 30), 6, np.uint8), h, (30, 30))
    assert (cls[:, :3] == 65).all() and (cls[0:28, 3:] == 6).all()


def test_warp_round_trip():
    from scipy import ndimage

    smooth = ndimage.gaussian_filter(np.random.default_rng(3).random((64, 64)), 5.0)
    smooth = (smooth - smooth.min()) / np.ptp(smooth)
    img = np.round(smooth * 255) / 255
    theta = np.radians(7.0)
    m = np.array([[np.cos(theta), -np.sin(theta), 5.0], [np.sin(theta), np.cos(theta), -3.0], [0, 0, 1]])
    h = Homography(m)
    back = warp_image(warp_image(img, h, (80, 80)), h.inverse(), img.shape)
    interior = back[12:52, 12:52]
    assert np.nanmax(np.abs(interior - img[12:52, 12:52])) < 2 / 255


# -- truth disparity ----------------------------------------------------------


def test_truth_self_consistency(small_pair):
    pair, camL, camR = small_pair["pair"], small_pair["camL"], small_pair["camR"]
    d = pair.truth_disparity.values
    valid = np.isfinite(d)
    assert valid.mean() > 0.5
    rows, cols = np.nonzero(valid)
    # rebuild each valid point on the viewing ray of its rectified left pixel
    sl, ss = pair.h_left.inverse().apply(rows.astype(float), cols.astype(float))
    ir = np.floor(sl + 0.5).astype(int)
    ic = np.floor(ss + 0.5).astype(int)
    z = small_pair["xyz_left"][ir, ic, 2]
    x, y, _, status = ground_intersect_arrays(camL, sl, ss, z)
    assert (status == 0).all()
    from semstereo.rectification import Rectification

    rect = Rectification(pair.h_left, pair.h_right, pair.shape, pair.z_ref, 0.0, 0.0)
    rl, cl, rr, cr = reproject_truth(camL, camR, rect, np.c_[x, y, z])
    assert np.max(np.hypot(rl - rows, cl - cols)) < 0.25
    assert np.max(np.hypot(rr - rows, cr - (cols + d[valid]))) < 0.25


def test_truth_parallax_bounded_by_holdout(small_pair):
    pair = small_pair["pair"]
    camL, camR = small_pair["camL"], small_pair["camR"]
    box = tile_world_box(camL, pair.shape, small_pair["zmin"], small_pair["zmax"])
    rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), pair.shape, z_ref=pair.z_ref)
    _, ypar = make_truth_disparity(camL, camR, rect, small_pair["xyz_left"])
    ok = np.isfinite(ypar)
    assert np.max(np.abs(ypar[ok])) <= 5 * rect.holdout_rms


def test_truth_nodata_and_classes(small_pair):
    pair = small_pair["pair"]
    d = pair.truth_disparity.values
    cls = pair.truth_class_left
    assert cls.shape == d.shape
    # water has no truth heights, so no truth disparity either
    assert not np.isfinite(d[cls == 9]).any()
    assert pair.truth_disparity.check_range()


def _plane_xyz(camL, size, z):
    rows, cols = size
    rr, cc = np.mgrid[0:rows, 0:cols].astype(float)
    x, y, _, _ = ground_intersect_arrays(camL, rr, cc, np.full(size, float(z)))
    return np.dstack([x, y, np.full(size, float(z))])


def test_planar_scene_at_reference_height_constant_disparity():
    # distant cameras are effectively affine, which the column model represents exactly
    camL, camR, box = rig_pair(altitude=5e8)
    rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512), z_ref=10.0)
    xyz = _plane_xyz(camL, (512, 512), 10.0)
    xyz[:5, :5] = np.nan
    disp, _ = make_truth_disparity(camL, camR, rect, xyz)
    v = disp.values
    ok = np.isfinite(v)
    assert np.ptp(v[ok]) < 1e-3
    assert abs(np.median(v[ok])) < 1e-3


def test_planar_disparity_perspective_residual_small():
    camL, camR, box = rig_pair()
    rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512), z_ref=10.0)
    disp, _ = make_truth_disparity(camL, camR, rect, _plane_xyz(camL, (512, 512), 10.0))
    assert np.ptp(disp.values[np.isfinite(disp.values)]) < 0.1


def test_nodata_xyz_gives_invalid_disparity():
    camL, camR, box = rig_pair()
    rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512), z_ref=10.0)
    xyz = _plane_xyz(camL, (512, 512), 10.0)
    xyz[100:200, 100:200] = np.nan
    disp, ypar = make_truth_disparity(camL, camR, rect, xyz)
    sl, ss = rect.h_left.inverse().apply(*np.mgrid[0:512, 0:512].astype(float))
    hole = (np.rint(sl) >= 100) & (np.rint(sl) < 200) & (np.rint(ss) >= 100) & (np.rint(ss) < 200)
    assert np.isnan(disp.values[hole]).all() and np.isnan(ypar[hole]).all()


def test_disparity_monotone_in_height():
    camL, camR, box = rig_pair()
    rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512), z_ref=20.0)
    meds = []
    for z in np.linspace(-10, 50, 7):
        disp, _ = make_truth_disparity(camL, camR, rect, _plane_xyz(camL, (512, 512), z))
        meds.append(np.nanmedian(disp.values))
    steps = np.diff(meds)
    assert (steps > 0).all() or (steps < 0).all()


def test_rectification_preserves_area():
    for azL, offL, azR, offR in [(100, 12, 250, 18), (0, 5, 180, 30), (45, 20, 135, 22)]:
        camL, camR, box = rig_pair(azL, offL, azR, offR)
        rect = fit_rectifying_transforms(virtual_correspondences(camL, camR, box), (512, 512))
        for h in rect.h_left,:
            m = h.matrix
            c = np.array([255.5, 255.5, 1.0])
            w = m[2] @ c
            # local Jacobian of the homography at the tile center
            J = (m[:2, :2] * w - np.outer(m[:2] @ c, m[2, :2])) / w**2
            assert abs(abs(np.linalg.det(J)) - 1.0) < 0.1


def test_occlusion_mask_flags_hidden_pixels():
    # pixel 1 sees a taller surface in the right image; pixel 2 matches pixel 3 at equal height
    d = np.array([[0.0, 0.0, 1.0, np.nan]])
    from semstereo.rasters import DisparityMap

    truth = DisparityMap.from_truth(d)
    zl = np.array([[5.0, 5.0, 0.0, 0.0]])
    zr = np.array([[5.0, 9.0, 0.0, 0.0]])
    occ = occlusion_mask(truth, zl, zr)
    assert occ.tolist() == [[False, True, False, False]]
