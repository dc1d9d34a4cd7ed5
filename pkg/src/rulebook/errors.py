"""Exception hierarchy shared across the package."""


class RulebookError(Exception):
    """Base class for all package errors."""


class InvalidInputError(RulebookError):
    """An argument violates a documented precondition."""


class IncompleteCacheError(RulebookError):
    """A firing-table lookup was required but the entry is missing."""

    def __init__(self, example_id: str, rule_id: str):
        self.example_id = example_id
        self.rule_id = rule_id
        super().__init__(f"no firing cached for example={example_id!r} rule={rule_id!r}")


class TooLargeError(RulebookError):
    """Exhaustive enumeration would exceed the subset guard."""


class BackendError(RulebookError):
    """Transport-level failure talking to a completion backend (retryable)."""


class ProtocolError(RulebookError):
    """The backend answered, but the payload does not match the wire protocol."""


class MissingPlaceholderError(RulebookError):
    """A template placeholder has no binding."""

    def __init__(self, template_id: str, placeholder: str):
        self.template_id = template_id
        self.placeholder = placeholder
        super().__init__(f"template {template_id!r} has no binding for {{{placeholder}}}")


class UnscoreableError(RulebookError):
    """No score token appeared in the judge's answer-position distribution."""


class EmptyGradientError(RulebookError):
    """A gradient response carried no exception bullets / points."""


class EmptyTaxonomyError(RulebookError):
    """Strategy discovery produced zero parseable strategies after the merge."""


class UnbalanceableError(RulebookError):
    """A class has no accepted traces, so upsampling cannot equalize counts."""

    def __init__(self, label: str):
        self.label = label
        super().__init__(f"class {label!r} has no accepted traces to upsample")


class UnbatchableError(RulebookError):
    """A class pool is empty, so its quota can never be filled."""

    def __init__(self, label: str):
        self.label = label
        super().__init__(f"class pool for {label!r} is empty")


class ConfigError(RulebookError):
    """Run configuration failed validation; message carries the field path."""


class FileFormatError(RulebookError):
    """A structured artifact file does not match its documented grammar."""


class MockScriptError(RulebookError):
    """The mock backend has no scripted response for a request."""
