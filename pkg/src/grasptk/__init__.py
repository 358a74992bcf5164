"""grasptk: contact-map transfer and dexterous grasp synthesis at desk scale."""

from .errors import (ContractViolation, DegenerateInput, GenerationFailure, GraspTkError,
                     NumericFault)

__version__ = "0.1.0"

__all__ = [
    "ContractViolation",
    "DegenerateInput",
    "GenerationFailure",
    "GraspTkError",
    "NumericFault",
    "__version__",
]
