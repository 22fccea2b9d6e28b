"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid run configuration (bad step size, missing key, ...)."""


class DomainError(ValueError):
    """Argument outside the domain where an operator is defined."""


class HypothesisViolation(ValueError):
    """A coefficient set fails one of the structural hypotheses (H1)-(H4).

    Attributes
    ----------
    hypothesis : str
        Label of the failed hypothesis, e.g. ``"H1"``.
    witness : dict
        The lattice point at which the violation was observed.
    """

    def __init__(self, hypothesis, message, witness=None):
        self.hypothesis = hypothesis
        self.witness = dict(witness or {})
        detail = ", ".join(f"{k}={v:.6g}" for k, v in self.witness.items())
        text = f"({hypothesis}) {message}"
        if detail:
            text += f" [witness: {detail}]"
        super().__init__(text)


class BlowUpError(FloatingPointError):
    """Non-finite values appeared during time stepping.

    Carries the last finite state so callers can inspect where the run failed.
    """

    def __init__(self, message, t_fail, last_state=None, last_time=None):
        self.t_fail = t_fail
        self.last_state = last_state
        self.last_time = last_time
        super().__init__(f"{message} (t={t_fail:.6g})")
