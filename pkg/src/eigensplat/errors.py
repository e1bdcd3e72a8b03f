"""
Exceptions raised by eigensplat. Everything derives from EigensplatError so the
command line can report any of them the same way.
"""


class EigensplatError(Exception):
    pass


class InvalidInputError(EigensplatError):
    pass


class InvalidCovarianceError(EigensplatError):
    pass


class TooFewPointsError(EigensplatError):
    pass


class DimensionMismatchError(EigensplatError):
    pass


class ImageTooSmallError(EigensplatError):
    pass


class EmptyCloudError(EigensplatError):
    pass


class InvalidSceneSpecError(EigensplatError):
    pass


class ConfigError(EigensplatError):
    pass


class PlyFormatError(EigensplatError):
    pass


class NonFiniteLossError(EigensplatError):
    """
    Training produced a NaN or infinite loss.
    The trainer writes a diagnostic dump before raising; its location is kept
    in `dump_path`.
    """

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
