"""Exception hierarchy shared by the store, the server and the client."""

from __future__ import annotations


class StoreError(Exception):
    """Base class for every error raised by revstore."""


class IntegrityError(StoreError):
    """Content does not match the fingerprint it was submitted under."""


class CorruptionError(StoreError):
    """Persistent state violates an invariant (bad chain, bad file, ...)."""


class DanglingReferenceError(CorruptionError):
    """A pointer resolved to a block that has been removed."""


class RefcountError(StoreError):
    """A reference count would underflow or overflow."""


class AtMostOnceError(StoreError):
    """Block removal was requested twice for the same segment."""


class VersionOrderError(StoreError):
    """A version was submitted out of order."""


class UnknownVersionError(StoreError):
    """The requested VM or version does not exist."""


class ParamsMismatchError(StoreError):
    """Chunking parameters differ from the ones the store was created with."""


class MissingSegmentsError(StoreError):
    def __init__(self, fingerprints, message="segments not stored"):
        self.fingerprints = list(fingerprints)
        super().__init__(
            f"{message}: " + ", ".join(fp.hex() for fp in self.fingerprints[:8])
            + (" ..." if len(self.fingerprints) > 8 else "")
        )


class IncompleteSegmentsError(MissingSegmentsError):
    """Referenced segments had blocks removed and must be uploaded again."""

    def __init__(self, fingerprints):
        super().__init__(fingerprints, "segments have removed blocks")
