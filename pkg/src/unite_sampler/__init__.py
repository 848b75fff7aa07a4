"""Compose independently trained diffusion experts at sampling time.

Each expert predicts the injected noise under its own condition and under
the null condition; :func:`compose_epsilon` blends the unconditional
predictions with reliability factors ``a`` and weights the conditional
ones with ``w``. Analytic Gaussian and mixture experts give exact answers
that the grid oracle can check.
"""

from .compose import (
    CompositionSpec,
    ExpertBundle,
    SpecViolation,
    classifier_free_epsilon,
    compose_epsilon,
    compose_epsilon_gpoe,
)
from .experts import NULL, Embedding, GaussianExpert, GmmExpert, Label, MlpExpert, expert_epsilon
from .sampler import SampleBatch, SamplerConfig, sample
from .schedule import NoiseSchedule, make_cosine_schedule, make_linear_schedule

__version__ = "0.1.0"

__all__ = [
    "CompositionSpec",
    "Embedding",
    "ExpertBundle",
    "GaussianExpert",
    "GmmExpert",
    "Label",
    "MlpExpert",
    "NULL",
    "NoiseSchedule",
    "SampleBatch",
    "SamplerConfig",
    "SpecViolation",
    "classifier_free_epsilon",
    "compose_epsilon",
    "compose_epsilon_gpoe",
    "expert_epsilon",
    "make_cosine_schedule",
    "make_linear_schedule",
    "sample",
]
