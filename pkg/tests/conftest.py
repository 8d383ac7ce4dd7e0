"""Shared synthetic rigs for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from semstereo import synthdata as sd
from semstereo.geometry import WorldBox


def make_rig(
    azimuth: float,
    off_nadir: float,
    jitter: float = 0.0,
    seed: int = 0,
    size: tuple[int, int] = (512, 512),
    gsd: float = 0.5,
    z_range: tuple[float, float] = (-20.0, 60.0),
    altitude: float = 500e3,
):
    """(ProjectiveCamera, RpcCamera, tile box) for a tile centered on the origin."""
    proj = sd.frame_camera((0.0, 0.0, 0.0), azimuth, off_nadir, gsd, size, altitude=altitude)
    half = 0.5 * max(size) * gsd
    norm_box = WorldBox(-1.5 * half, 1.5 * half, -1.5 * half, 1.5 * half, z_range[0] - 30, z_range[1] + 30)
    norm = sd.NormalizationSpec.for_volume(norm_box, size)
    rpc = sd.synth_rpc_from_projective(proj, norm, jitter, seed)
    tile = WorldBox(-0.9 * half, 0.9 * half, -0.9 * half, 0.9 * half, *z_range)
    return proj, rpc, tile


def random_points(box: WorldBox, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.c_[
        rng.uniform(box.xmin, box.xmax, n),
        rng.uniform(box.ymin, box.ymax, n),
        rng.uniform(box.zmin, box.zmax, n),
    ]


@pytest.fixture(scope="session")
def small_scene():
    return sd.gen_scene(3, size=(128, 128), gsd=1.0, composition={"building": 0.12, "tree": 0.05, "water": 0.04})


@pytest.fixture(scope="session")
def small_pair(small_scene):
    """Rectified urban pair over ``small_scene`` with truth, plus its inputs."""
    from semstereo.rectification import rectify_pair

    size = (256, 256)
    out = {}
    for side, (az, off, seed) in {"left": (100.0, 12.0, 1), "right": (250.0, 18.0, 2)}.items():
        _, cam = sd.view_camera(small_scene, sd.ViewSpec(az, off), size, gsd=0.5, cubic_jitter=1e-3, seed=seed)
        season = sd.SeasonParams(noise_sigma=2 / 255, seed=seed)
        img = sd.render_view(small_scene, cam, season, size, view_seed=seed)
        xyz, cls, _ = sd.render_truth(small_scene, cam, size)
        out[side] = (img, cam, xyz, cls)
    (li, lc, lxyz, lcls), (ri, rc, _, rcls) = out["left"], out["right"]
    zmin = float(np.nanmin(small_scene.dtm.heights)) - 20
    zmax = float(np.nanmax(small_scene.dsm.heights)) + 20
    pair = rectify_pair(li, ri, lc, rc, zmin, zmax, xyz_left=lxyz, class_left=lcls, class_right=rcls)
    return {"pair": pair, "camL": lc, "camR": rc, "xyz_left": lxyz, "zmin": zmin, "zmax": zmax}


# -- acceptance summary ------------------------------------------------------------

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
