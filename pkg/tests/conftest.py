import numpy as np
import pytest

from survrisk.simulate import SimulationConfig, simulate_cohort
from support import HEADER


@pytest.fixture
def write_csv(tmp_path):
    def _write(rows, header=HEADER, name="cohort.csv"):
        path = tmp_path / name
        path.write_text("\n".join([header, *rows]) + "\n", encoding="utf-8")
        return path
    return _write


@pytest.fixture(scope="session")
def sim_cohort():
    """A moderate cohort with every covariate carrying signal, three locations."""
    cfg = SimulationConfig(
        n_subjects=3000, n_locations=3, seed=11, weibull_shape=1.2, weibull_scale=80000,
        censoring_rate=2e-4,
        beta={"age": 0.04, "sex": 0.4, "hdl": -0.01, "total_cholesterol": 0.003,
              "hypertension": 0.3, "diabetes": 0.5, "smoker": 0.6, "antihypertensive": 0.2,
              "ckd": 0.5, "ra": 0.4},
        covariate_distributions={"ckd": (0.2,), "ra": (0.1,)},
    )
    return simulate_cohort(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
