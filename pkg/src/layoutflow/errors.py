"""Exception types shared across the package."""


class LayoutFlowError(Exception):
    """Base class for package-specific errors."""


class ConfigError(LayoutFlowError):
    """Bad configuration: unknown keys, invalid values, missing paths."""


class GenerationError(LayoutFlowError):
    """Scene synthesis could not satisfy the placement constraints."""


class AnnotationError(LayoutFlowError):
    """Annotation file is malformed or violates the schema."""
