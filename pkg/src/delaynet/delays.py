"""Bounded time-varying delay channels.

A channel stores every pushed value with its step stamp and hands back the
value stamped ``k - d_k`` where ``d_k`` is drawn uniformly from ``[h1, h2]``
or read from a replayed trace. Lookups are indexed, so a later message may
be older than an earlier one; no FIFO ordering is imposed.
"""

from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_int_range

__all__ = [
    "DelayBounds",
    "DelayChannel",
    "TimestampedMeasurement",
    "InsufficientHistory",
    "load_trace",
    "dump_trace",
    "draw_trace",
]


class InsufficientHistory(LookupError):
    """Raised when a channel is asked for a stamp it no longer (or never) held."""


@dataclass(frozen=True)
class DelayBounds:
    h1_I: int
    h2_I: int
    h1_O: int
    h2_O: int

    def __post_init__(self):
        check_int_range(self.h1_I, "h1_I", lo=0)
        check_int_range(self.h2_I, "h2_I", lo=self.h1_I)
        check_int_range(self.h1_O, "h1_O", lo=0)
        check_int_range(self.h2_O, "h2_O", lo=self.h1_O)

    @property
    def tau(self):
        return self.h2_I - self.h1_I

    def output_range(self):
        return range(self.h1_O, self.h2_O + 1)

    def seconds(self, T_c):
        """Wall-clock bounds ``(input, output)`` for sample time ``T_c``."""
        return (self.h1_I * T_c, self.h2_I * T_c), (self.h1_O * T_c, self.h2_O * T_c)


@dataclass(frozen=True)
class TimestampedMeasurement:
    value: np.ndarray
    origin_step: int

    def age(self, k):
        return k - self.origin_step


class DelayChannel:
    """Ring buffer of stamped values with a bounded random or replayed delay.

    Parameters
    ----------
    h1, h2 : int
        Delay bounds in steps.
    rng : numpy.random.Generator, optional
        Source for uniform delays when no trace is loaded.
    prefill : array_like, optional
        Value returned for stamps ``< 0`` (history before the run starts).
    capacity : int, optional
        Number of stamps retained; at least ``h2 + 1``.
    """

    def __init__(self, h1, h2, rng=None, prefill=None, capacity=None):
        self.h1 = check_int_range(h1, "h1", lo=0)
        self.h2 = check_int_range(h2, "h2", lo=self.h1)
        capacity = self.h2 + 1 if capacity is None else int(capacity)
        if capacity < self.h2 + 1:
            raise ValueError(f"capacity {capacity} cannot hold a delay of {self.h2} steps")
        self.capacity = capacity
        self.rng = rng
        self.prefill = None if prefill is None else np.array(prefill, dtype=float)
        self._buf = deque(maxlen=capacity)
        self._last = None
        self._trace = None
        self._trace_pos = 0
        self.delays = []

    def push(self, k, value):
        k = int(k)
        if self._last is not None and k != self._last + 1:
            raise ValueError(f"push at step {k} after step {self._last}; steps must advance by 1")
        self._buf.append((k, np.array(value, dtype=float)))
        self._last = k

    def lookup(self, stamp):
        stamp = int(stamp)
        if stamp < 0:
            if self.prefill is None:
                raise InsufficientHistory(f"stamp {stamp} precedes the run and no prefill is set")
            return self.prefill.copy()
        if not self._buf:
            raise InsufficientHistory("channel is empty")
        first = self._buf[0][0]
        if stamp < first or stamp > self._last:
            raise InsufficientHistory(
                f"stamp {stamp} outside retained window [{first}, {self._last}]"
            )
        return self._buf[stamp - first][1].copy()

    def replay_trace(self, d_seq):
        seq = [int(d) for d in d_seq]
        bad = [d for d in seq if d < self.h1 or d > self.h2]
        if bad:
            raise ValueError(f"trace has delays outside [{self.h1}, {self.h2}]: {bad[:5]}")
        self._trace = seq
        self._trace_pos = 0

    def next_delay(self, rng=None):
        if self._trace is not None:
            if self._trace_pos >= len(self._trace):
                raise InsufficientHistory("replayed delay trace exhausted")
            d = self._trace[self._trace_pos]
            self._trace_pos += 1
            return d
        if self.h1 == self.h2:
            return self.h1
        rng = rng if rng is not None else self.rng
        if rng is None:
            raise ValueError("no RNG and no replay trace; cannot draw a delay")
        return int(rng.integers(self.h1, self.h2 + 1))

    def sample_delayed(self, k, rng=None):
        d = self.next_delay(rng)
        assert self.h1 <= d <= self.h2
        value = self.lookup(int(k) - d)
        self.delays.append(d)
        return TimestampedMeasurement(value=value, origin_step=int(k) - d)


def load_trace(path):
    """Read a delay trace: one integer per line, blank lines ignored."""
    text = Path(path).read_text()
    return [int(line) for line in text.split() if line.strip()]


def dump_trace(path, d_seq):
    Path(path).write_text("".join(f"{int(d)}\n" for d in d_seq))
    return Path(path)


def draw_trace(h1, h2, length, rng):
    """Pre-draw a uniform integer delay trace, e.g. to share between controllers."""
    return [int(d) for d in rng.integers(h1, h2 + 1, size=int(length))]
