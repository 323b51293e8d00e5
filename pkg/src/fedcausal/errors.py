"""Exception hierarchy."""


class FedCausalError(Exception):
    """Base class for all package errors."""


class DimensionError(FedCausalError, ValueError):
    """Array shapes or name lists are inconsistent."""


class NonFiniteError(FedCausalError, ValueError):
    """Data or parameters contain NaN or infinite values."""


class SingularHessianError(FedCausalError, ArithmeticError):
    """Design is rank deficient or a matrix to be inverted is singular."""


class NonConvergenceError(FedCausalError, RuntimeError):
    """A fit did not converge where convergence is required."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class OverlapError(FedCausalError, ValueError):
    """Propensity scores outside the hard-failure bounds."""


class NotPositiveSemidefiniteError(FedCausalError, ArithmeticError):
    """A variance matrix failed the PSD check."""


class LayoutError(FedCausalError, ValueError):
    """Unknown covariate name, block conflict or inconsistent layouts."""


class ProvenanceError(FedCausalError, ValueError):
    """Nuisance models do not match the requested federation mode."""


class ProtocolError(FedCausalError):
    """Malformed or inconsistent protocol message."""


class VersionMismatchError(ProtocolError):
    """Message was written by an incompatible protocol version."""


class FingerprintMismatchError(ProtocolError):
    """Messages in one session refer to different layouts."""


class PaddingViolationError(ProtocolError):
    """Padded summary has nonzero entries outside the site's own blocks."""


class SiteFailureError(FedCausalError, RuntimeError):
    """A site raised during a protocol round; the session was aborted."""

    def __init__(self, site_id, cause):
        super().__init__(f"site {site_id!r} failed: {cause}")
        self.site_id = site_id
        self.cause = cause
