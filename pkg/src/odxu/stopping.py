"""Patience-based early stopping on a monitored loss."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EarlyStop:
    """Halt once the best loss has not improved by more than ``delta`` for ``eta`` epochs.

    The first epoch always sets the reference. A later epoch counts as an
    improvement only if it beats the current reference by strictly more than
    ``delta``; improvements of at most ``delta`` leave the reference unchanged.
    """

    eta: int = 20
    delta: float = 5e-4

    def __post_init__(self):
        if int(self.eta) != self.eta or self.eta < 1:
            raise ValueError(f"eta must be a positive integer, got {self.eta}")
        if not self.delta > 0:
            raise ValueError(f"delta must be > 0, got {self.delta}")

    def monitor(self) -> "StopMonitor":
        return StopMonitor(self)


class StopMonitor:
    def __init__(self, rule: EarlyStop):
        self.rule = rule
        self.best: float | None = None
        self.wait = 0
        self.epochs = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; True means stop after this epoch."""
        self.epochs += 1
        if self.best is None or loss < self.best - self.rule.delta:
            self.best = loss
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.rule.eta


def halt_epoch(losses, rule: EarlyStop) -> int | None:
    """Zero-based epoch after which training halts, or None if it never does."""
    mon = rule.monitor()
    for i, loss in enumerate(losses):
        if mon.update(float(loss)):
            return i
    return None
