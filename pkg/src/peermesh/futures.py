"""A minimal completion future shared by the sim and live runtimes.

Protocol operations return a Future and complete it from event-loop
callbacks. In simulation, tests drive the loop and then read .result();
in live mode, callers off the loop thread block in .wait().
"""

from __future__ import annotations

import threading

from .errors import PeermeshError


class FutureTimeout(PeermeshError):
    pass


class Future:
    _PENDING = object()

    def __init__(self):
        self._value = Future._PENDING
        self._error = None
        self._callbacks = []
        self._event = None

    def done(self) -> bool:
        return self._value is not Future._PENDING or self._error is not None

    def set_result(self, value) -> None:
        if self.done():
            return
        self._value = value
        self._fire()

    def set_exception(self, error: BaseException) -> None:
        if self.done():
            return
        self._error = error
        self._fire()

    def _fire(self):
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)
        if self._event is not None:
            self._event.set()

    def add_done_callback(self, cb) -> None:
        if self.done():
            cb(self)
        else:
            self._callbacks.append(cb)

    def result(self):
        if not self.done():
            raise RuntimeError("future is not done")
        if self._error is not None:
            raise self._error
        return self._value

    def exception(self):
        if not self.done():
            raise RuntimeError("future is not done")
        return self._error

    def wait(self, timeout: float | None = None):
        """Block a non-loop thread until completion, then return the result."""
        if not self.done():
            if self._event is None:
                self._event = threading.Event()
            if self.done():  # completed while arming
                self._event.set()
            if not self._event.wait(timeout):
                raise FutureTimeout("timed out after %r s" % timeout)
        return self.result()
