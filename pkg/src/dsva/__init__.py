"""Zero-shot scene classification by deep semantic-visual alignment.

Attribute annotation through a joint text/image embedder, a patch-grid vision
transformer with attribute prototypes, attention concentration cropping and
(generalized) zero-shot evaluation.
"""

from dsva.core import (
    AttributeVocabulary,
    ClassAttributeMatrix,
    Config,
    ConfigError,
    DSVAError,
    InputError,
    ShapeError,
    SplitSpec,
    ValidationError,
    load_config,
    seeded_rng,
)

__version__ = "0.1.0"

__all__ = [
    "AttributeVocabulary",
    "ClassAttributeMatrix",
    "Config",
    "ConfigError",
    "DSVAError",
    "InputError",
    "ShapeError",
    "SplitSpec",
    "ValidationError",
    "load_config",
    "seeded_rng",
]
