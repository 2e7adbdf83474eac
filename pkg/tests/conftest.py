import numpy as np
import pytest

from mcrecon.geometry import Intrinsics, PoseSE3, se3_exp


def random_pose(rng, rot_scale=0.5, trans_scale=1.0):
    return se3_exp(np.concatenate([rng.normal(scale=rot_scale, size=3), rng.normal(scale=trans_scale, size=3)]))


def fd_close(analytic, numeric, rel=1e-4, floor=1e-3):
    """Element-wise relative check; entries with |numeric| < floor use an absolute bound rel*floor."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    bound = rel * np.maximum(np.abs(numeric), floor)
    return np.all(np.abs(analytic - numeric) <= bound)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def K64():
    return Intrinsics(fx=56.0, fy=56.0, cx=31.5, cy=23.5, width=64, height=48)


ACCEPTANCE = []


def acceptance_line(cid, ok, detail):
    """Record one criterion verdict; printed again in the terminal summary."""
    line = f"{cid:<4} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s[1:4].strip() or 0)):
            terminalreporter.write_line(line)


__all__ = ["random_pose", "fd_close", "PoseSE3", "acceptance_line"]
