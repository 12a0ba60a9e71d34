import numpy as np
import pytest

from genkit.data import RoleMap, StackedDataset

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_application_like(seed=11, n_rct=400, n_target=3000):
    """RCT plus target sample with one X, one binary Z and an RCT-only V.

    The treatment effect is ``-3 - 2 Z - 0.6 (V - 4)``; V lives roughly on
    [1, 8] in the RCT so grids like 3:5 are inside its range.
    """
    rng = np.random.default_rng(seed)
    age1 = rng.normal(35, 9, n_rct)
    z1 = (rng.random(n_rct) < 0.3).astype(float)
    v1 = np.clip(rng.normal(4.5 - 0.5 * z1, 1.2), 1.0, 8.0)
    t = (rng.random(n_rct) < 0.5).astype(float)
    effect = -3.0 - 2.0 * z1 - 0.6 * (v1 - 4.0)
    y = 10 + 0.05 * age1 + 1.5 * z1 + 0.8 * v1 + t * effect + rng.normal(0, 2, n_rct)
    age0 = rng.normal(40, 10, n_target)
    z0 = (rng.random(n_target) < 0.1).astype(float)
    nan0 = np.full(n_target, np.nan)
    return StackedDataset(
        s=np.r_[np.ones(n_rct), np.zeros(n_target)], t=np.r_[t, nan0], y=np.r_[y, nan0],
        covariates={"age": np.r_[age1, age0], "black": np.r_[z1, z0], "cigs": np.r_[v1, nan0]})


APPLICATION_ROLES = {"age": "X", "black": "Z", "cigs": "V"}

CONFIG_TOML = """\
s_column = "S"
t_column = "T"
y_column = "Y"

[roles]
age = "X"
black = "Z"
cigs = "V"
"""


@pytest.fixture
def application_data():
    return make_application_like()


@pytest.fixture
def application_roles():
    return RoleMap(APPLICATION_ROLES)


@pytest.fixture
def application_files(tmp_path):
    data = make_application_like()
    csv_path = tmp_path / "data.csv"
    data.to_csv(csv_path)
    cfg = tmp_path / "config.toml"
    cfg.write_text(CONFIG_TOML)
    return csv_path, cfg
