"""Tests for mpmflow.breaker module."""

import threading

import pytest

from mpmflow.breaker import BreakerState, BreakerTripped, StepBreaker
from mpmflow.engine import SimulationBlowup


class TestStepBreaker:
    """Tests for StepBreaker."""

    def test_initial_state_closed(self):
        """Test initial state is closed at full step."""
        breaker = StepBreaker(0.05)
        assert breaker.state == BreakerState.CLOSED
        assert breaker.step_size == 0.05
        assert breaker.allow() is True

    def test_failure_halves_step(self):
        """Test each failure halves the step size."""
        breaker = StepBreaker(0.08)
        assert breaker.record_failure("blowup") == pytest.approx(0.04)
        assert breaker.record_failure() == pytest.approx(0.02)
        assert breaker.state == BreakerState.BACKING_OFF
        assert breaker.stats.halvings == 2

    def test_trips_after_max_halvings(self):
        """Test the breaker opens once halvings are exhausted."""
        breaker = StepBreaker(1.0, max_halvings=3)
        for _ in range(3):
            breaker.record_failure()
        assert breaker.state == BreakerState.BACKING_OFF
        breaker.record_failure()
        assert breaker.state == BreakerState.OPEN
        assert breaker.step_size == pytest.approx(0.125)
        assert breaker.allow() is False

    def test_success_closes_but_keeps_step(self):
        """Test recovery closes the breaker at the reduced step."""
        breaker = StepBreaker(1.0)
        breaker.record_failure()
        breaker.record_success()
        assert breaker.state == BreakerState.CLOSED
        assert breaker.step_size == pytest.approx(0.5)
        assert breaker.consecutive_failures == 0

    def test_context_manager_success(self):
        """Test context manager records success."""
        breaker = StepBreaker(1.0)
        with breaker:
            pass
        assert breaker.stats.successes == 1

    def test_context_manager_suppresses_matching(self):
        """Test matching exceptions are recorded and swallowed."""
        breaker = StepBreaker(1.0, trip_on=(SimulationBlowup,))
        with breaker:
            raise SimulationBlowup("det < 0", particle_id=3, step=7)
        assert breaker.stats.failures == 1
        assert "det < 0" in breaker.stats.last_failure

    def test_context_manager_propagates_others(self):
        """Test unrelated exceptions pass through untouched."""
        breaker = StepBreaker(1.0, trip_on=(SimulationBlowup,))
        with pytest.raises(KeyError):
            with breaker:
                raise KeyError("x")
        assert breaker.stats.failures == 0

    def test_context_manager_raises_when_open(self):
        """Test entering a tripped breaker raises."""
        breaker = StepBreaker(1.0, max_halvings=0)
        breaker.record_failure()
        with pytest.raises(BreakerTripped):
            with breaker:
                pass

    def test_invalid_step(self):
        """Test non-positive initial step is rejected."""
        with pytest.raises(ValueError):
            StepBreaker(0.0)

    def test_thread_safety(self):
        """Test concurrent records keep consistent counts."""
        breaker = StepBreaker(1.0, max_halvings=1000)

        def worker():
            for _ in range(50):
                breaker.record_success()

        threads = [threading.Thread(target=worker) for _ in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert breaker.stats.attempts == 200
