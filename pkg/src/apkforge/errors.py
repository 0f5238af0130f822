"""Typed failures and warnings raised across the pipeline.

Every error carries a short machine-readable ``reason`` (the class name) that
ends up verbatim in failed dataset records.
"""


class ForgeError(Exception):
    """Base class for all pipeline errors."""

    @property
    def reason(self) -> str:
        return type(self).__name__


# -- ZIP / APK container
class MalformedZip(ForgeError):
    pass


class CrcMismatch(ForgeError):
    pass


class DecompressError(ForgeError):
    pass


class MissingDex(ForgeError):
    pass


class MissingManifest(ForgeError):
    pass


# -- DEX
class BadMagic(ForgeError):
    pass


class TruncatedDex(ForgeError):
    pass


class IndexOutOfRange(ForgeError):
    def __init__(self, section: str, index: int):
        super().__init__(f"{section}: index {index} out of range")
        self.section = section
        self.index = index


# -- AXML
class UnbalancedElements(ForgeError):
    pass


class TruncatedChunk(ForgeError):
    def __init__(self, chunk_type: int, detail: str = ""):
        msg = f"chunk 0x{chunk_type:04x} truncated"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.chunk_type = chunk_type


# -- imaging
class EmptyInput(ForgeError):
    pass


class InvalidThresholds(ForgeError):
    pass


class InvalidTarget(ForgeError):
    pass


class SizeMismatch(ForgeError):
    pass


class EncodeError(ForgeError):
    pass


# -- classifier
class InvalidSize(ForgeError):
    pass


class DegenerateDataset(ForgeError):
    pass


class EmptyEvalSet(ForgeError):
    pass


# -- orchestration
class NoInputs(ForgeError):
    pass


class UnwritableOutput(ForgeError):
    pass


class MissingLabel(ForgeError):
    pass


class ConfigError(ForgeError):
    pass


class ForgeWarning(UserWarning):
    """Non-fatal anomaly; collected into the per-APK record."""


class UnsupportedCompression(ForgeWarning):
    pass


class BlockTooLarge(ForgeWarning):
    pass
