"""Pulse-width-modulated teacher selection for the student branch."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import losses


class Teacher(enum.Enum):
    CLASS_TEACHER = "class_teacher"
    SEG_TEACHER = "seg_teacher"


@dataclass(frozen=True)
class PWMSchedule:
    """Rectangular wave of period ``T``; the first ``T_h = round(T / tau)``
    iterations of each period are HIGH (class-teacher), the rest LOW."""

    T: int = 150
    tau: float = 5.0
    T_h: int = field(init=False)
    T_l: int = field(init=False)

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise ValueError(f"pwm.T must be an integer >= 2, got {self.T}")
        if not self.tau > 1:
            raise ValueError(f"pwm.tau must be > 1, got {self.tau}")
        high = min(max(int(round(self.T / self.tau)), 1), self.T - 1)
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "T_h", high)
        object.__setattr__(self, "T_l", self.T - high)


def select_teacher(t: int, sched: PWMSchedule) -> Teacher:
    if t < 0:
        raise ValueError("iteration index must be >= 0")
    return Teacher.CLASS_TEACHER if t % sched.T < sched.T_h else Teacher.SEG_TEACHER


def alternate_distillation_loss(t, sched, P_s, ct_labels, st_labels, tags, image, cfg, lambda_str=0.1, spacing=1.0):
    """Student loss from whichever teacher the wave selects at ``t``.

    ``st_labels`` may be a zero-argument callable so the seg-teacher targets
    are only built during LOW phases. It yields B^st or (B^st, valid).
    """
    if select_teacher(t, sched) is Teacher.CLASS_TEACHER:
        B_ct, R_ct = ct_labels
        return losses.loss_ct_to_s(P_s, B_ct, R_ct, tags, image, cfg, lambda_str, spacing)
    B_st = st_labels() if callable(st_labels) else st_labels
    valid = None
    if isinstance(B_st, tuple):
        B_st, valid = B_st
    return losses.loss_st_to_s(P_s, B_st, tags, image, cfg, lambda_str, spacing, valid)
