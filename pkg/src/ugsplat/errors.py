"""Exception hierarchy.

Every error carries a short machine-readable ``code`` so the command line
can print ``error[CODE]: message`` and exit nonzero.
"""

from __future__ import annotations


class UGSplatError(Exception):
    code = "E_GENERIC"


class PLYParseError(UGSplatError, ValueError):
    code = "E_PLY"


class EmptySceneError(UGSplatError, ValueError):
    code = "E_EMPTY_SCENE"


class SceneConfigError(UGSplatError, ValueError):
    code = "E_CONFIG"


class CameraError(UGSplatError, ValueError):
    code = "E_CAMERA"


class DimensionError(UGSplatError, ValueError):
    code = "E_DIMENSION"


class DegenerateDirectionError(UGSplatError, ValueError):
    code = "E_DEGENERATE"


class DomainError(UGSplatError, ValueError):
    code = "E_DOMAIN"


class ShapeError(UGSplatError, ValueError):
    code = "E_SHAPE"


class InputError(UGSplatError, ValueError):
    code = "E_INPUT"


class ContractError(UGSplatError, RuntimeError):
    code = "E_CONTRACT"


class CheckpointFormatError(UGSplatError, ValueError):
    code = "E_CHECKPOINT"


class NonFiniteLossError(UGSplatError, FloatingPointError):
    code = "E_NONFINITE"

    def __init__(self, message: str, indices=()):
        super().__init__(message)
        self.indices = list(indices)
