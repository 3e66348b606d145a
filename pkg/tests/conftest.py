"""Shared test configuration.

Hypothesis runs with a bounded example count and no deadline: the suite
targets a single-core box and several properties quantize real arrays.
"""

from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")
