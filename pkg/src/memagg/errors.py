"""Exception types shared across the aggregator package."""


class AggregatorError(Exception):
    """Base class for every error this package raises deliberately."""


class InvalidUri(AggregatorError, ValueError):
    """String is not an absolute http(s) URI."""


class LinkFormatError(AggregatorError):
    """Base for TimeMap codec failures."""


class MalformedLink(LinkFormatError):
    """Structurally broken link-value: unbalanced brackets, missing rel, duplicate roles."""


class BadDatetime(LinkFormatError):
    """Memento entry whose datetime attribute is missing or not strict RFC 1123."""


class MissingOriginal(LinkFormatError):
    """TimeMap without a rel="original" entry."""


class OutOfRange(AggregatorError, ValueError):
    """Instant not representable as a 14-digit timestamp (years 1000-9999)."""


class SourceConfigError(AggregatorError, ValueError):
    """Invalid source definition (bad id, timeout, or template)."""


class BadTemplate(SourceConfigError):
    """URI template with multiple placeholders or a non-absolute expansion."""


class UnparseableUri(AggregatorError, ValueError):
    """Client-supplied URI-R that cannot be normalized."""


class ConfigParseError(AggregatorError):
    """Source config file that does not parse or validate; message carries location."""


class DuplicateId(AggregatorError):
    """Two sources in one registry share an id."""


class MalformedTrace(AggregatorError):
    """Trace header that does not match the wire grammar. Callers treat it as absent."""


class CycleDetected(AggregatorError):
    """This instance already appears in the request's aggregator chain."""

    def __init__(self, instance_id: str, nonce: str):
        super().__init__(f"instance {instance_id} already visited (nonce {nonce})")
        self.instance_id = instance_id
        self.nonce = nonce


class NoSources(AggregatorError):
    """Nothing left to query after enabled- and trace-filtering. Not an empty result."""

    def __init__(self, message: str, reports=None):
        super().__init__(message)
        self.reports = list(reports or [])


class MixedUriR(AggregatorError):
    """Attempt to merge TimeMaps for different original resources."""


class BadPreference(AggregatorError):
    """Undecodable or invalid Prefer header payload; request proceeds unapplied."""


class PortInUse(AggregatorError, OSError):
    """Requested mock port already bound."""


class ScenarioError(AggregatorError):
    """Scenario file invalid: bad node kind, duplicate id, or dangling source reference."""
