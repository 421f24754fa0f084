"""
Exceptions and exit codes for the ddibp package.
Every error raised on purpose by the library derives from DdibpError.
"""


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VERIFICATION_FAILED = 2


class DdibpError(Exception):
    """Base error class."""

    def __init__(self, message: str, exit_code: int = EXIT_USAGE, detail: str = None):
        self.message = message
        self.exit_code = exit_code
        self.detail = detail
        super().__init__(self.message)

    def __str__(self) -> str:
        if self.detail:
            return f"{self.message} ({self.detail})"
        return self.message


class DomainError(DdibpError, ValueError):
    """Input outside the mathematical domain of an operation."""

    def __init__(self, message: str = "Value outside domain", detail: str = None):
        super().__init__(message, EXIT_USAGE, detail)


class ConfigError(DdibpError):
    """Invalid or incomplete run configuration."""

    def __init__(self, message: str = "Invalid configuration", key: str = None, detail: str = None):
        self.key = key
        if key and detail is None:
            detail = f"offending key: {key}"
        super().__init__(message, EXIT_USAGE, detail)


class DimensionMismatchError(DdibpError, ValueError):
    """Data and distance inputs disagree on the number of customers."""

    def __init__(self, message: str = "Dimension mismatch", detail: str = None):
        super().__init__(message, EXIT_USAGE, detail)


class SamplerStateError(DdibpError):
    """Incrementally maintained chain state disagrees with a fresh recomputation."""

    def __init__(self, message: str = "Sampler state inconsistent", detail: str = None):
        super().__init__(message, EXIT_USAGE, detail)


class VerificationError(DdibpError):
    """One or more invariant checks failed."""

    def __init__(self, message: str = "Verification failed", detail: str = None):
        super().__init__(message, EXIT_VERIFICATION_FAILED, detail)


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the process exit status."""
    if isinstance(exc, DdibpError):
        return exc.exit_code
    return EXIT_USAGE


# Error documentation for the CLI

ERROR_DOCS = {
    "0": {
        "description": "Success",
        "situations": [
            "Subcommand finished and all outputs were written",
            "verify: every check passed"
        ],
        "example": None
    },
    "1": {
        "description": "Usage or configuration error",
        "situations": [
            "Unknown flag or missing subcommand",
            "Configuration key with an invalid value",
            "Referenced data or distance file does not exist",
            "Data rows do not match the distance matrix size",
            "Negative distance or non-finite observed value",
            "fit --checkpoint file written for other data or another geometry"
        ],
        "example": {
            "error": "ConfigError",
            "message": "Invalid value for decay.beta",
            "detail": "offending key: decay.beta"
        }
    },
    "2": {
        "description": "Verification failure",
        "situations": [
            "An empirical statistic fell outside its standard-error bound",
            "An exact oracle disagreed beyond its tolerance"
        ],
        "example": {
            "error": "VerificationError",
            "message": "Verification failed",
            "detail": "2 of 20 checks failed: sharing_rate_match_0, ibp_reduction_rates"
        }
    }
}


def exit_status_help() -> str:
    """Exit-status section for the command-line help, rendered from ERROR_DOCS."""
    lines = ["Exit codes:"]
    for code, doc in ERROR_DOCS.items():
        lines.append(f"  {code}  {doc['description']}")
        lines.extend(f"       - {situation}" for situation in doc["situations"])
    return "\n".join(lines)
