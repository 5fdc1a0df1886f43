import planlm.autodiff as ad
import pytest


@pytest.fixture(autouse=True)
def _debug_checks():
    ad.DEBUG_CHECKS = True
    yield
    ad.DEBUG_CHECKS = False
