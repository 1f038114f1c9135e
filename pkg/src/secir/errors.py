"""Exception hierarchy shared by all secir modules."""


class SecirError(Exception):
    """Base class for all errors raised by this package."""


class SecretOutOfRange(SecirError):
    """Secret magnitude too large to admit two in-range additive shares."""


class ShapeMismatch(SecirError):
    pass


class SameOwner(SecirError):
    """Both shares passed to reconstruct belong to the same party."""


class MaterialExhausted(SecirError):
    """A correlated-randomness queue was consumed past its provisioned end."""


class DurationTooShort(SecirError):
    pass


class PeerClosed(SecirError):
    pass


class Timeout(SecirError):
    pass


class ProtocolViolation(SecirError):
    """Frame ordering or framing invariants were broken on the channel."""


class DivisorMaskedZero(SecirError):
    """Masked divisor reveal landed below the usable share range."""


class SingularW(SecirError):
    """Masking product of a matrix inversion is rank deficient."""


class SingularInput(SecirError):
    """Matrix inversion retries exhausted; the input itself is singular."""


class SingularP(SecirError):
    """Random transform matrix resampling failed during PCA."""


class EigensolverNoConverge(SecirError):
    pass


class EmptyCluster(SecirError):
    pass


class OddSpatialDim(SecirError):
    """Pooling layer received a feature map with an odd spatial size."""


class ConfigMismatch(SecirError):
    """Config-hash handshake between the two servers failed."""


class ConfigError(SecirError):
    pass


# CLI exit codes (documented in the README).
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PROTOCOL = 3
EXIT_MATERIAL = 4
EXIT_EQUIVALENCE = 5
