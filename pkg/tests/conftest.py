import numpy as np
import pytest

from slotkit import tensor as tt


@pytest.fixture(autouse=True)
def clean_tape():
    tt.TAPE.reset()
    tt.TAPE.recording = True
    yield
    tt.TAPE.reset()


@pytest.fixture
def f64():
    """Run the test body in float64 mode, restoring the old default after."""
    old = tt.default_dtype()
    tt.set_default_dtype(np.float64)
    yield
    tt.set_default_dtype(old)
