import numpy as np
import pytest

from voictl.estimation import covariance_schedule
from voictl.lqr import riccati_backward
from voictl.model import model_from_dict, scalar_model


def random_model(rng: np.random.Generator, n: int, sensors: int, N: int, m: int | None = None,
                 time_varying: bool = True):
    """Random valid model with well-conditioned covariances."""
    m = m or max(1, n - 1)

    def spd(d, lo=0.2):
        G = rng.normal(size=(d, d))
        return (G @ G.T / d + lo * np.eye(d)).tolist()

    def per_stage(make):
        return [make() for _ in range(N + 1)] if time_varying else make()

    dims = [int(rng.integers(1, 3)) for _ in range(sensors)]
    cfg = {
        "N": N,
        "A": per_stage(lambda: (np.eye(n) * 0.9 + 0.2 * rng.normal(size=(n, n))).tolist()),
        "B": per_stage(lambda: rng.normal(size=(n, m)).tolist()),
        "W": per_stage(lambda: spd(n)),
        "R": per_stage(lambda: spd(m)),
        "Q": spd(n, 0.0),
        "Qfinal": spd(n, 0.0),
        "sensors": [{"C": per_stage(lambda p=p: rng.normal(size=(p, n)).tolist()),
                     "V": per_stage(lambda p=p: spd(p))} for p in dims],
        "m0": rng.normal(size=n).tolist(),
        "M0": spd(n),
        "lambda": float(rng.uniform(0.1, 0.9)),
    }
    return model_from_dict(cfg)


@pytest.fixture(scope="session")
def std1():
    m = scalar_model(1)
    return m, riccati_backward(m), covariance_schedule(m)


@pytest.fixture(scope="session")
def std2():
    m = scalar_model(2)
    return m, riccati_backward(m), covariance_schedule(m)


@pytest.fixture(scope="session")
def std10():
    m = scalar_model(10)
    return m, riccati_backward(m), covariance_schedule(m)


@pytest.fixture(scope="session")
def table10(std10):
    from voictl.voidp import backward_induction

    m, sol, sch = std10
    return backward_induction(m, sol, schedule=sch)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
