"""Shared fixtures and the acceptance-criteria summary."""
import numpy as np
import pytest

from hdivstat.mesh import BoundarySpec, classify_faces, generate_uniform_quad_mesh, generate_uniform_tri_mesh
from hdivstat.spaces import build_pressure_space, build_velocity_space

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    number, title = marker
    outcome = _CRITERIA.get(number, (title, "PASS"))[1]
    if report.failed:
        outcome = "FAIL"
    elif report.skipped and outcome != "FAIL":
        outcome = "SKIP"
    _CRITERIA[number] = (title, outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is not None:
        report._criterion = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcome = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {outcome}  {title}")


# --------------------------------------------------------------------------
# fixtures
# --------------------------------------------------------------------------
def make_spaces(n=4, k=1, cell="quad"):
    gen = generate_uniform_quad_mesh if cell == "quad" else generate_uniform_tri_mesh
    mesh = gen(n, n)
    fs = classify_faces(mesh, BoundarySpec.all_dirichlet(mesh.bounding_box()))
    return mesh, build_velocity_space(mesh, k, fs), build_pressure_space(mesh, k, zero_mean=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def stream_velocity(coeffs):
    """Velocity ``curl psi`` of ``psi = sum c_ij sin(i pi x) sin(j pi y)``; zero normal flux on the unit square."""
    coeffs = np.asarray(coeffs, dtype=float)

    def u(x, t=0.0):
        x = np.atleast_2d(x)
        out = np.zeros((len(x), 2))
        for i in range(coeffs.shape[0]):
            for j in range(coeffs.shape[1]):
                a, b = (i + 1) * np.pi, (j + 1) * np.pi
                c = coeffs[i, j]
                out[:, 0] += c * b * np.sin(a * x[:, 0]) * np.cos(b * x[:, 1])
                out[:, 1] -= c * a * np.cos(a * x[:, 0]) * np.sin(b * x[:, 1])
        return out

    return u
