"""Exception types raised across the package."""


class GeoChordError(Exception):
    """Base class for all package errors."""


# geokey
class OutOfRegion(GeoChordError, ValueError):
    pass


class KeyWidthMismatch(GeoChordError, ValueError):
    pass


class InsufficientAnchors(GeoChordError, ValueError):
    pass


class DegenerateGeometry(GeoChordError, ValueError):
    pass


class InvalidObservation(GeoChordError, ValueError):
    pass


# cluster
class DegenerateK(GeoChordError, ValueError):
    pass


class NoActionNeeded(GeoChordError):
    pass


# dht / route
class DuplicateKey(GeoChordError, KeyError):
    pass


class UnknownNode(GeoChordError, KeyError):
    pass


class RoutingStuck(GeoChordError):
    pass


class TtlExceeded(GeoChordError):
    pass


# swarm
class DimensionError(GeoChordError, ValueError):
    pass


# nettest
class UnrecoverableFrame(GeoChordError):
    pass


class QueueOverflow(GeoChordError):
    pass


# bench
class IncomparableReports(GeoChordError, ValueError):
    pass


class UnknownExperiment(GeoChordError, ValueError):
    pass
