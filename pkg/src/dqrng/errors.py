"""Exception hierarchy shared by the simulator, engine, transport and CLI."""


class DqrngError(Exception):
    pass


class ConfigurationError(DqrngError, ValueError):
    """Invalid source, session or experiment parameters."""


class ProtocolError(DqrngError):
    """A participant or caller broke the round protocol."""


class PhaseViolation(ProtocolError):
    pass


class DuplicateReveal(ProtocolError):
    pass


class MalformedReveal(ProtocolError, ValueError):
    pass


class VerificationFailed(ProtocolError):
    """At least one channel pair failed the CAR or distribution gate."""

    def __init__(self, failed_pairs):
        self.failed_pairs = list(failed_pairs)
        names = ", ".join(f"{i}-{j}" for i, j in self.failed_pairs)
        super().__init__(f"verification failed for pairs: {names}")


class EmptySelection(ProtocolError):
    """I_final is empty; the round must be rerun with more data."""


class InsufficientEntropy(ProtocolError):
    """Fewer selected quantum values than requested outputs."""


class FramingError(DqrngError, ValueError):
    pass


class EnvelopeError(DqrngError, ValueError):
    """Envelope payload does not parse, or (sender, seq) was already seen."""
