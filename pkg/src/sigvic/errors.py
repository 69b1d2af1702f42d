"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes, channel counts or hyperparameters that do not fit together."""


class DomainError(ValueError):
    """A value outside its admissible range (e.g. a lambda outside the model's range)."""


class DecodeError(ValueError):
    """A compressed payload could not be decoded."""


class ContainerError(DecodeError):
    """Malformed bitstream container: bad magic, version, length or checksum."""
