"""
Base Stage

All pipeline stages inherit from this. A stage takes a task dict, does one
step of the planning workflow and hands back a StageResult; library errors
are caught here and mapped onto the CLI exit codes.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Dict, Optional

from pydantic import ValidationError

from ..core.errors import ChunkwiseError, StaticInfeasibleError

logger = logging.getLogger(__name__)


class StageRole(Enum):
    """Roles of the stages a Coordinator can run."""
    ESTIMATE = "estimate"
    SIMULATE = "simulate"
    PLAN = "plan"
    VERIFY = "verify"


class ExitCode(IntEnum):
    OK = 0
    CONFIG = 1
    INFEASIBLE = 2
    PROPERTY_FAILURE = 3


@dataclass
class StageResult:
    """Outcome of one stage run."""
    success: bool
    data: Any
    error: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return int(self.metadata.get("exit_code", ExitCode.OK if self.success else ExitCode.CONFIG))


class BaseStage(ABC):
    """
    Base class for pipeline stages.

    Attributes:
        name: The stage's identifier
        role: Which step of the workflow it performs
        description: Brief description of what it produces
    """

    def __init__(self, name: str, role: StageRole, description: str = ""):
        self.name = name
        self.role = role
        self.description = description

    @abstractmethod
    def execute(self, task: Dict[str, Any]) -> StageResult:
        """
        Execute a task. Must be implemented by subclasses.

        Args:
            task: The task specification

        Returns:
            StageResult containing execution outcome
        """

    def run(self, task: Dict[str, Any]) -> StageResult:
        """execute() with library errors turned into failed results."""
        try:
            return self.execute(task)
        except StaticInfeasibleError as e:
            logger.error("%s: %s", self.name, e)
            return StageResult(False, None, str(e), {"exit_code": ExitCode.INFEASIBLE})
        except (ChunkwiseError, ValidationError, ValueError, OSError) as e:
            logger.error("%s: %s", self.name, e)
            return StageResult(False, None, str(e), {"exit_code": ExitCode.CONFIG})

    def __repr__(self):
        return f"<{self.__class__.__name__}(name={self.name}, role={self.role.value})>"
