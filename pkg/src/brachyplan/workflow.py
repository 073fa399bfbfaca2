"""Treatment stages and the legal transitions between them.

The case lifecycle is a straight line from arrival to close-out, with one
branch: a patient found ineligible at diagnosis goes straight to CLOSED.
"""

from __future__ import annotations

from enum import Enum


class TreatmentPhase(Enum):
    """Coarse archive phases an artifact belongs to."""

    PRE = "PRE"
    INTRA = "INTRA"
    POST = "POST"


class WorkflowStage(Enum):
    ARRIVAL = "ARRIVAL"
    DIAGNOSIS = "DIAGNOSIS"
    DEVICE_SELECTION = "DEVICE_SELECTION"
    PREPLAN = "PREPLAN"
    INTRAOP = "INTRAOP"
    POSTOP = "POSTOP"
    CLOSED = "CLOSED"


LEGAL_TRANSITIONS = frozenset(
    {
        (WorkflowStage.ARRIVAL, WorkflowStage.DIAGNOSIS),
        (WorkflowStage.DIAGNOSIS, WorkflowStage.DEVICE_SELECTION),
        (WorkflowStage.DIAGNOSIS, WorkflowStage.CLOSED),
        (WorkflowStage.DEVICE_SELECTION, WorkflowStage.PREPLAN),
        (WorkflowStage.PREPLAN, WorkflowStage.INTRAOP),
        (WorkflowStage.INTRAOP, WorkflowStage.POSTOP),
        (WorkflowStage.POSTOP, WorkflowStage.CLOSED),
    }
)

# Which archive phase artifacts land in while a case sits in each stage.
STAGE_PHASE = {
    WorkflowStage.ARRIVAL: TreatmentPhase.PRE,
    WorkflowStage.DIAGNOSIS: TreatmentPhase.PRE,
    WorkflowStage.DEVICE_SELECTION: TreatmentPhase.PRE,
    WorkflowStage.PREPLAN: TreatmentPhase.PRE,
    WorkflowStage.INTRAOP: TreatmentPhase.INTRA,
    WorkflowStage.POSTOP: TreatmentPhase.POST,
    WorkflowStage.CLOSED: TreatmentPhase.POST,
}


class IllegalTransitionError(ValueError):
    def __init__(self, current: WorkflowStage, target: WorkflowStage):
        super().__init__(f"illegal stage transition {current.name} -> {target.name}")
        self.current = current
        self.target = target


def can_transition(current: WorkflowStage, target: WorkflowStage) -> bool:
    return (current, target) in LEGAL_TRANSITIONS


def check_transition(current: WorkflowStage, target: WorkflowStage) -> None:
    if not can_transition(current, target):
        raise IllegalTransitionError(current, target)
