import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tpsreg.phantom import write_case
from tpsreg.segment import Mask
from tpsreg.volume import GridGeometry, IntensityKind, Volume

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("repo")

# criterion number -> (passed, measured detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

# same field of view as the full-size crop, 4 mm voxels: fast plumbing tests
SMALL_GEOMETRY = GridGeometry((32, 72, 120), (4.0, 4.0, 4.0))


def ball_mask(radius: float, pad: int = 3, spacing=(1.0, 1.0, 1.0), label="ball") -> Mask:
    n = int(2 * np.ceil(radius) + 1 + 2 * pad)
    c = (n - 1) / 2.0
    i, j, k = np.meshgrid(*[np.arange(n)] * 3, indexing="ij")
    bits = (i - c) ** 2 + (j - c) ** 2 + (k - c) ** 2 <= radius ** 2
    return Mask(GridGeometry((n, n, n), spacing), bits, label)


def hu_volume(values, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> Volume:
    values = np.asarray(values)
    return Volume(GridGeometry(values.shape, spacing, origin), values, IntensityKind.HU)


@pytest.fixture(scope="session")
def small_case(tmp_path_factory):
    """A 4 mm phantom case on disk: returns the config path."""
    d = tmp_path_factory.mktemp("small_case")
    return write_case(d, SMALL_GEOMETRY, n_organs=4, seed=3)


@pytest.fixture(scope="session")
def self_case(tmp_path_factory):
    """A case whose moving scan is the fixed scan itself."""
    import shutil

    d = tmp_path_factory.mktemp("self_case")
    cfg = write_case(d, SMALL_GEOMETRY, n_organs=4, seed=5)
    for suffix in (".mhd", ".raw"):
        shutil.copy(d / f"fixed{suffix}", d / f"moving{suffix}")
    for p in d.glob("fixed_*.raw"):
        shutil.copy(p, d / p.name.replace("fixed_", "moving_"))
    return cfg


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
