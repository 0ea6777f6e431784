"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a documented contract (shape, format, invariant)."""


class EmbeddingFormatError(ValidationError):
    """A PEB1 embedding file is malformed."""


class ManifestError(ValidationError):
    """A cohort manifest is malformed or inconsistent."""
