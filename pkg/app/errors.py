"""Hierarquia de exceções do projeto.

Cada erro nomeado nas operações tem uma classe própria; todas herdam de
`CapsIEError` e também da exceção builtin mais próxima, para que código
externo possa capturar `ValueError` ou `OSError` normalmente.
"""


class CapsIEError(Exception):
    """Raiz de todas as exceções do projeto."""


class DimensionError(CapsIEError, ValueError):
    pass


class ParameterError(CapsIEError, ValueError):
    pass


class NumericError(CapsIEError, ArithmeticError):
    pass


class ContractError(CapsIEError, ValueError):
    pass


class DegenerateBatchError(CapsIEError, ValueError):
    pass


class ConfigurationError(CapsIEError, ValueError):
    pass


class DivisionGuardError(CapsIEError, ZeroDivisionError):
    pass


class DegenerateTargetError(CapsIEError, ValueError):
    pass


class StorageError(CapsIEError, OSError):
    pass


class UsageError(CapsIEError):
    pass


class TrainingDivergedError(NumericError):
    """Loss não finita durante o pré-treino.

    Args:
        batch_index (int): Índice do batch (dentro da época) que divergiu.
        components (dict): Termos da loss do batch que divergiu (vazio se a
            falha veio antes de a loss existir).
        stage (str): "forward" (antes da loss) ou "backward" (gradiente).
    """

    def __init__(self, message, batch_index=None, components=None, stage="forward"):
        super().__init__(message)
        self.batch_index = batch_index
        self.components = dict(components or {})
        self.stage = stage


def shape_mismatch(op, a, b):
    """Monta um DimensionError citando as duas shapes envolvidas."""
    return DimensionError(f"{op}: shapes incompatíveis {tuple(a)} e {tuple(b)}")
