"""Hiérarchie d'exceptions du pipeline de balayage déformable."""

from typing import Optional


class DeformScanError(Exception):
    """Classe de base pour toutes les erreurs du paquet."""


class EmptyInputError(DeformScanError):
    pass


class SizeError(DeformScanError):
    pass


class ShapeError(DeformScanError):
    pass


class BoundsError(DeformScanError):
    pass


class ParameterError(DeformScanError):
    pass


class NumericError(DeformScanError):
    """Valeur non finie rencontrée ; `step` indique l'étape fautive si connue."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class ConfigError(DeformScanError):
    pass


class PointCloudParseError(DeformScanError):
    """Fichier XYZ/PLY mal formé ; `line` est le numéro de ligne (base 1)."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ParamFileError(DeformScanError):
    pass


class ParamShapeError(ParamFileError):
    def __init__(self, name: str, expected, found):
        super().__init__(
            f"shape mismatch for array '{name}': expected {tuple(expected)}, found {tuple(found)}"
        )
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)


class GradCheckError(DeformScanError):
    """Tolérance dépassée ; le rapport complet est porté par `report`."""

    def __init__(self, report):
        super().__init__(report.message)
        self.report = report
