import os
import sys

from hypothesis import HealthCheck, settings

settings.register_profile(
    "grolab",
    deadline=None,
    max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("grolab")

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))
