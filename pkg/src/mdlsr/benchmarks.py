"""Built-in planted models for recovery experiments.

Both models have two parameter slots, two input variables on [-2, 2]^2, and
component variances of comparable size, so no sub-model explains most of the
signal far below the constant-model transition.  model_b's negative
amplitude keeps exp-rescaling reparameterizations from undercutting it.
"""

from __future__ import annotations

from .learnability import PlantedModel
from .trees import default_vocabulary, parse_text

DOMAIN_2D = ((-2.0, 2.0), (-2.0, 2.0))

MODEL_A_TEXT = "((_c0 * sin(x1)) + (_c1 * (x2 * x2)))"
MODEL_A_THETA = (12.0, 8.0)

MODEL_B_TEXT = "((_c0 * exp(x1)) + (_c1 * (x1 * x2)))"
MODEL_B_THETA = (-6.0, 8.0)


def model_a() -> PlantedModel:
    tree = parse_text(MODEL_A_TEXT, default_vocabulary(), dim=2)
    return PlantedModel("model_a", tree, MODEL_A_THETA, DOMAIN_2D)


def model_b() -> PlantedModel:
    tree = parse_text(MODEL_B_TEXT, default_vocabulary(), dim=2)
    return PlantedModel("model_b", tree, MODEL_B_THETA, DOMAIN_2D)


def benchmark_models() -> list[PlantedModel]:
    return [model_a(), model_b()]
