import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from respfocus.autofocus import (
    PhaseCoeffs,
    integrate_images,
    mb_sharpness,
    optimize_phase,
    phase_from_trajectory,
)
from respfocus.errors import FocusError, ShapeError, UndefinedMetricError
from respfocus.imaging import ImageGrid, IntensityVolume, SarImage, TimeWindow, backproject
from respfocus.scene import (
    RespiratoryMotion,
    ScanTrajectory,
    Scatterer,
    Scene,
    default_radar,
    respiratory_displacement,
)
from respfocus.simulator import CubeAxes, simulate_cube, window_indices
from respfocus.tfsep import MixtureParams, cube_spectrogram, em_fit

RADAR = default_radar()
TRAJ = ScanTrajectory([0, 0, -0.04], [0, 0, 9.9e-3], 8.0)
AXES = CubeAxes(range_offset=0.75, num_range_bins=10, angle_bins=32)
WINDOW = TimeWindow(4.0, 8.0)
GRID = ImageGrid.centered([0, 0.9, 0], [0.1, 0.05, 0.2], [0.02, 0.01, 0.01])
OMEGA = 2 * np.pi * 0.25


def _grid(dims=(3, 4, 5), spacing=(0.01, 0.02, 0.03)):
    return ImageGrid([0, 0, 0], spacing, dims)


# ------------------------------------------------------------------ sharpness


def test_single_voxel_sharpness():
    g = _grid()
    v = np.zeros(g.dims, complex)
    v[1, 2, 3] = 7 - 2j
    assert mb_sharpness(SarImage(g, v)) == pytest.approx(1 / g.voxel_volume, rel=1e-12)


def test_uniform_sharpness():
    g = _grid()
    v = np.full(g.dims, 0.3 + 0.4j)
    assert mb_sharpness(SarImage(g, v)) == pytest.approx(1 / (g.size * g.voxel_volume), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-6, 1e6))
def test_sharpness_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    g = _grid()
    v = rng.normal(size=g.dims) + 1j * rng.normal(size=g.dims)
    a = mb_sharpness(SarImage(g, v))
    b = mb_sharpness(SarImage(g, scale * np.exp(1j * 0.3) * v))
    assert abs(b - a) <= 1e-12 * a
    # an intensity volume carries |I|^2 directly
    assert mb_sharpness(IntensityVolume(g, np.abs(v) ** 2)) == pytest.approx(a, rel=1e-12)


def test_zero_image_sharpness_undefined():
    with pytest.raises(UndefinedMetricError):
        mb_sharpness(SarImage(_grid(), np.zeros((3, 4, 5))))


# --------------------------------------------------------- phase initialisation


def test_phase_from_trajectory_amplitude():
    C = np.array([[0.5, 1.2, 0.0, 0.0, 0.0, 0.02]])
    p = phase_from_trajectory(MixtureParams(1, [1.0], OMEGA, C), 0)
    assert abs(p.b1) == pytest.approx(2 * np.pi * 1.2 / OMEGA)
    assert p.b2 == 0
    zero = phase_from_trajectory(MixtureParams(1, [1.0], OMEGA, np.zeros((1, 6))), 0)
    assert not np.any(zero.phase(np.linspace(0, 8, 20)))


def test_phase_derivative_matches_doppler():
    C = np.array([[0.0, 0.9, -0.4, 0.2, 0.1, 0.0]])
    params = MixtureParams(1, [1.0], OMEGA, C)
    p = phase_from_trajectory(params, 0)
    t = np.linspace(1, 7, 30)
    h = 1e-6
    dphi = (p.phase(t + h) - p.phase(t - h)) / (2 * h)
    np.testing.assert_allclose(dphi, 2 * np.pi * params.trajectories(t)[0], atol=1e-6)


def test_initial_phase_tracks_true_motion():
    m = RespiratoryMotion(OMEGA, (0j, 2.5e-3 * np.exp(0.7j), 0.3e-3 * np.exp(-0.4j)))
    s = Scatterer([0.0, 0.9, 0.0], 1.0, m)
    cube = simulate_cube(Scene((s,)), RADAR, TRAJ, AXES)
    sp = cube_spectrogram(cube, 0.9, np.pi / 2, 16, 4, 64)
    params, _ = em_fit(sp, 1, 0.8)
    init = phase_from_trajectory(params, 0)
    t = cube.times[window_indices(cube, WINDOW)]
    truth = 4 * np.pi / RADAR.wavelength * respiratory_displacement(m, t)
    d = init.phase(t) - truth
    assert np.sqrt(np.mean((d - d.mean()) ** 2)) <= 0.3


def test_phase_coeff_round_trip():
    p = PhaseCoeffs(1 + 2j, -0.5j, 1.3)
    assert PhaseCoeffs.from_vector(p.as_vector(), 1.3) == p
    assert p.to_dict()["b1_rad"] == [1.0, 2.0]


# ----------------------------------------------------------------- optimisation


@pytest.fixture(scope="module")
def still_cube():
    return simulate_cube(Scene((Scatterer([0.0, 0.9, 0.0]),)), RADAR, TRAJ, AXES)


def test_stationary_target_not_improved_spuriously(still_cube):
    res = optimize_phase(still_cube, TRAJ, GRID, WINDOW, PhaseCoeffs(0j, 0j, OMEGA))
    assert 1.0 <= res.sharpness_after / res.sharpness_before <= 1.05


@pytest.mark.parametrize("seed", [0, 1])
def test_injected_phase_recovered(still_cube, seed):
    rng = np.random.default_rng(seed)
    b = rng.uniform(0.5, 3.0) * np.exp(2j * np.pi * rng.random())
    truth = PhaseCoeffs(b, 0j, OMEGA)
    spoiled = still_cube.with_values(
        still_cube.values * np.exp(1j * truth.phase(still_cube.times))[None, None, :])
    reference = mb_sharpness(backproject(still_cube, TRAJ, GRID, WINDOW))
    res = optimize_phase(spoiled, TRAJ, GRID, WINDOW, PhaseCoeffs(0j, 0j, OMEGA))
    t = still_cube.times[window_indices(still_cube, WINDOW)]
    d = res.phase - truth.phase(t)
    assert np.sqrt(np.mean((d - d.mean()) ** 2)) <= 0.1
    assert res.sharpness_after >= 0.95 * reference


def test_breathing_target_sharpens():
    lam = RADAR.wavelength
    m = RespiratoryMotion(OMEGA, (0j, lam / 2 * np.exp(1.1j)))
    cube = simulate_cube(Scene((Scatterer([0.0, 0.9, 0.0], 1.0, m),)), RADAR, TRAJ, AXES)
    params, _ = em_fit(cube_spectrogram(cube, 0.9, np.pi / 2, 16, 4, 64), 1, 0.8)
    res = optimize_phase(cube, TRAJ, GRID, WINDOW, phase_from_trajectory(params, 0))
    assert res.sharpness_after >= 2 * res.sharpness_before


def test_result_never_worse_than_start(still_cube):
    bad = PhaseCoeffs(2.0 + 1j, 0.3j, OMEGA)
    start = mb_sharpness(backproject(still_cube, TRAJ, GRID, WINDOW,
                                     phase=bad.phase(still_cube.times[window_indices(still_cube, WINDOW)])))
    res = optimize_phase(still_cube, TRAJ, GRID, WINDOW, bad)
    assert res.sharpness_after >= start
    assert res.sharpness_after >= res.sharpness_before


def test_zero_cube_is_a_focus_error(still_cube):
    with pytest.raises(FocusError):
        optimize_phase(still_cube.with_values(np.zeros_like(still_cube.values)), TRAJ, GRID,
                       WINDOW, PhaseCoeffs(0j, 0j, OMEGA))


# -------------------------------------------------------------------- fusion


def test_integrate_single_and_permutation():
    rng = np.random.default_rng(0)
    g = _grid()
    imgs = [SarImage(g, rng.normal(size=g.dims) + 1j * rng.normal(size=g.dims)) for _ in range(3)]
    np.testing.assert_allclose(integrate_images(imgs[:1]).values, np.abs(imgs[0].values) ** 2,
                               rtol=1e-14)
    a = integrate_images(imgs).values
    b = integrate_images(imgs[::-1]).values
    np.testing.assert_allclose(a, b, rtol=1e-14)


def test_integrate_disjoint_supports():
    g = _grid()
    u, v = np.zeros(g.dims, complex), np.zeros(g.dims, complex)
    u[0, 0, 0], v[2, 3, 4] = 2.0, 1j
    fused = integrate_images([SarImage(g, u), SarImage(g, v)]).values
    assert np.count_nonzero(fused) == 2
    assert fused[0, 0, 0] == 4.0 and fused[2, 3, 4] == 1.0


def test_integrate_grid_mismatch():
    with pytest.raises(ShapeError):
        integrate_images([SarImage(_grid(), np.zeros((3, 4, 5))),
                          SarImage(_grid((3, 4, 6)), np.zeros((3, 4, 6)))])
