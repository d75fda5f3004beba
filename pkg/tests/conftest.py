import json
from pathlib import Path

import pytest

from cubeattn import kernels

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(params=kernels.available())
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def golden_values():
    return json.loads((GOLDEN / "toy_pipeline.json").read_text())


@pytest.fixture(scope="session")
def toy_pipeline(golden_values):
    """The golden two-stage run, trained once per session (about 2-3 minutes)."""
    from cubeattn.dit.pipeline import run_pipeline

    return run_pipeline(
        seed=golden_values["seed"],
        stage1_steps=golden_values["stage1_steps"],
        stage2_steps=golden_values["stage2_steps"],
        sample_steps=golden_values["sample_steps"],
    )
