"""
Step-Size Breaker

Back-off guard for iterative optimizers whose objective can fail (for
example a simulation blow-up at an aggressive parameter guess):
- Each failure halves the step size
- Consecutive failures beyond ``max_halvings`` trip the breaker
- A success while backing off closes it again, keeping the reduced step

Usage:
    from mpmflow.breaker import StepBreaker, BreakerTripped

    breaker = StepBreaker(initial_step=0.05, max_halvings=5, trip_on=(SimulationError,))

    result = None
    while result is None:
        with breaker:  # raises BreakerTripped once the halvings run out
            result = evaluate(x - breaker.step_size * direction)
"""

import logging
import threading
from dataclasses import dataclass
from datetime import datetime
from enum import Enum
from typing import Optional, Tuple, Type


class BreakerState(Enum):
    """Breaker states."""
    CLOSED = "closed"           # Full step size
    BACKING_OFF = "backing_off"  # Step reduced after failures
    OPEN = "open"               # Tripped; no further attempts


class BreakerTripped(RuntimeError):
    """Raised when an attempt is made on a tripped breaker."""
    pass


@dataclass
class BreakerStats:
    """Breaker statistics."""
    attempts: int = 0
    successes: int = 0
    failures: int = 0
    halvings: int = 0
    state_changes: int = 0
    last_failure: Optional[str] = None
    last_failure_time: Optional[datetime] = None


class StepBreaker:
    """
    Halves a step size on failure and trips after too many in a row.

    States:
    - CLOSED: last attempt succeeded at full step
    - BACKING_OFF: at least one failure since the last recovery
    - OPEN: ``max_halvings`` halvings were not enough

    Used as a context manager, exceptions matching ``trip_on`` are recorded
    as failures and suppressed; anything else propagates untouched.
    """

    def __init__(
        self,
        initial_step: float,
        max_halvings: int = 5,
        trip_on: Tuple[Type[BaseException], ...] = (Exception,),
    ):
        if not initial_step > 0.0:
            raise ValueError(f"initial_step must be > 0, got {initial_step}")
        self.initial_step = initial_step
        self.max_halvings = max_halvings
        self.trip_on = trip_on

        self._state = BreakerState.CLOSED
        self._step = initial_step
        self._consecutive_failures = 0
        self._lock = threading.Lock()

        self.stats = BreakerStats()
        self.logger = logging.getLogger("mpmflow.breaker")

    @property
    def state(self) -> BreakerState:
        return self._state

    @property
    def step_size(self) -> float:
        return self._step

    @property
    def consecutive_failures(self) -> int:
        return self._consecutive_failures

    def allow(self) -> bool:
        return self._state != BreakerState.OPEN

    def record_success(self):
        with self._lock:
            self.stats.attempts += 1
            self.stats.successes += 1
            self._consecutive_failures = 0
            if self._state == BreakerState.BACKING_OFF:
                self._transition_to(BreakerState.CLOSED)

    def record_failure(self, reason: str = "") -> float:
        """Register a failure; returns the new step size."""
        with self._lock:
            self.stats.attempts += 1
            self.stats.failures += 1
            self.stats.last_failure = reason or None
            self.stats.last_failure_time = datetime.now()
            self._consecutive_failures += 1

            if self._consecutive_failures > self.max_halvings:
                self._transition_to(BreakerState.OPEN)
                return self._step

            self._step *= 0.5
            self.stats.halvings += 1
            self.logger.warning(
                f"Back-off {self._consecutive_failures}/{self.max_halvings}: "
                f"step -> {self._step:.4g}" + (f" ({reason})" if reason else "")
            )
            self._transition_to(BreakerState.BACKING_OFF)
            return self._step

    def _transition_to(self, new_state: BreakerState):
        if new_state != self._state:
            self.logger.info(f"Step breaker: {self._state.value} -> {new_state.value}")
            self._state = new_state
            self.stats.state_changes += 1

    def __enter__(self):
        if not self.allow():
            raise BreakerTripped(
                f"Step breaker tripped after {self.stats.halvings} halvings "
                f"(last failure: {self.stats.last_failure})"
            )
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            self.record_success()
            return False
        if issubclass(exc_type, self.trip_on):
            self.record_failure(str(exc_val))
            return True
        return False


__all__ = ["BreakerState", "BreakerStats", "BreakerTripped", "StepBreaker"]
