"""Exception types shared across the package."""


class KamforgeError(Exception):
    """Base class for all package-specific failures."""


class RealityError(KamforgeError):
    """A field that must represent a real function failed the conjugate-symmetry check."""


class ModeOverflowError(KamforgeError):
    """A spectral operation dropped more mass past the mode cap than allowed.

    Attributes
    ----------
    dropped_mass : float
        Absolute coefficient mass (sum of magnitudes) outside the cap.
    total_mass : float
        Total coefficient mass before truncation.
    """

    def __init__(self, msg, dropped_mass=0.0, total_mass=0.0):
        super().__init__(msg)
        self.dropped_mass = dropped_mass
        self.total_mass = total_mass


class SmallDivisorError(KamforgeError):
    """A homological solve met a divisor below the admissible floor.

    Attributes
    ----------
    mode : tuple
        Offending mode (k_1, ..., k_d, l).
    divisor : float
        Magnitude of the offending divisor.
    floor : float
        The floor that was violated.
    """

    def __init__(self, msg, mode=None, divisor=None, floor=None):
        super().__init__(msg)
        self.mode = mode
        self.divisor = divisor
        self.floor = floor


class ContractionError(KamforgeError):
    """A fixed-point iteration (implicit coordinate change) failed to contract."""


class EscapeError(KamforgeError):
    """A trajectory left the configured phase-space bounds."""


class DomainError(KamforgeError):
    """A point left the action domain a representation is valid on."""
