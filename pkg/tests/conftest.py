from pathlib import Path

import pytest

from cloudalloc.task_model import DelayModel, TaskSpec, load_config

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

TABLE1_RATES = (0.1608, 0.1495, 0.3585, 0.3312)


@pytest.fixture
def table1():
    return load_config(CONFIGS / "table1.json")


@pytest.fixture
def table2_fixed():
    return load_config(CONFIGS / "table2_fixed.json")


def app(n: int, **changes) -> TaskSpec:
    """Application ``n`` of the public-cloud example with b = 2."""
    w, d, m = {1: (0.02, 0.5, 2.0), 2: (0.06, 0.4, 2.0), 3: (0.1, 0.4, 10.0), 4: (0.12, 0.6, 10.0)}[n]
    fields = dict(period=d, workload=w, deadline=d, qos_slope=2.0, penalty=m)
    fields.update(changes)
    if "deadline" in changes:
        fields.setdefault("period", changes["deadline"])
        fields["period"] = max(fields["period"], changes["deadline"])
    return TaskSpec(**fields)


FIXED_DELAY = DelayModel(0.1, 0.0, "fixed")
