"""
Exception hierarchy for the EHR-RAG pipeline.

Each error class carries the process exit code the CLI maps it to.
"""

from typing import Any, Dict, List, Optional


class EhrRagError(Exception):
    """Base class for all pipeline errors"""

    exit_code = 1


class UsageError(EhrRagError):
    exit_code = 1


class ConfigError(EhrRagError):
    """Config file could not be parsed or failed validation"""

    exit_code = 2


class ParameterError(EhrRagError, ValueError):
    exit_code = 2


class TemplateRenderError(EhrRagError):
    exit_code = 2

    def __init__(self, template_id: str, variable: str):
        super().__init__(f"Template '{template_id}' is missing variable '{variable}'")
        self.template_id = template_id
        self.variable = variable


class DataError(EhrRagError):
    exit_code = 3


class RecordValidationError(DataError):
    pass


class SchemaError(DataError):
    pass


class LabelParseError(DataError):
    """Model reply did not contain a label from the task's label space"""


class TransportError(EhrRagError):
    """
    Chat or embedding transport failure

    Only errors with retriable=True are retried by the gateway.
    """

    exit_code = 4

    def __init__(self, message: str, retriable: bool = True):
        super().__init__(message)
        self.retriable = retriable


class ProviderError(TransportError):
    def __init__(self, message: str, chunk_id: Optional[str] = None, retriable: bool = True):
        super().__init__(message, retriable=retriable)
        self.chunk_id = chunk_id


class ContextBudgetError(EhrRagError):
    exit_code = 4


class StageError(EhrRagError):
    """
    Failure inside predict_patient

    Carries the stage name and whatever traces were collected before the failure.
    """

    def __init__(self, stage: str, cause: BaseException, partial_traces: Optional[List[Dict[str, Any]]] = None):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.partial_traces = partial_traces or []
        self.exit_code = getattr(cause, "exit_code", 1)
