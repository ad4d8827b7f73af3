import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dexroll.config import TaskConfig, package_dir
from dexroll.rotations import quat_exp, quat_mul, quat_normalize

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# acceptance verdicts: criterion number -> list of (check, passed, detail)
VERDICTS = {}


def record(criterion, check, passed, detail=""):
    """Store one acceptance check; the terminal summary prints a line per criterion."""
    VERDICTS.setdefault(criterion, []).append((check, bool(passed), detail))
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        checks = VERDICTS[n]
        ok = all(c[1] for c in checks)
        shown = [c for c in checks if not c[1]] if not ok else checks
        detail = "; ".join(f"{c[0]}: {c[2]}" if c[2] else c[0] for c in shown)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}  {detail}")


def random_quat(rng):
    return quat_normalize(rng.normal(size=4))


def perturb_quat(theta, d):
    """Body-frame perturbation ``theta * exp(d)``, the tangent convention of the package."""
    return quat_mul(theta, quat_exp(np.asarray(d, float)))


def central_diff(f, x, h=1e-6):
    """Jacobian of ``f`` at ``x`` by central differences (columns = coordinates of x)."""
    x = np.asarray(x, float)
    f0 = np.asarray(f(x), float)
    J = np.empty(f0.shape + x.shape)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        J[..., i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return J


@pytest.fixture(scope="session")
def tasks():
    """The five shipped tasks, built once per session."""
    out = {}
    for name in ("valve_turning", "cuboid_turning", "screwdriver_turning", "cuboid_alignment", "complex_reorientation"):
        out[name] = TaskConfig.load(package_dir() / f"{name}.json").build()
    return out


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
