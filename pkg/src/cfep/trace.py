"""Line-delimited JSON tracing of message-passing internals.

Each record is one JSON object per line with a `kind` field plus the
emitting site's fields; sticky context (e.g. the iteration counter) is
attached via `bind`. Intended for debugging and regression diffs, not for
bulk data capture.
"""

from __future__ import annotations

import json

__all__ = ["Tracer"]


class Tracer:
    """Writes trace records to a file-like object, optionally filtered by kind."""

    def __init__(self, stream, kinds=None):
        self._stream = stream
        self._kinds = set(kinds) if kinds else None
        self._bound = {}
        self.records = 0

    def bind(self, **context):
        self._bound.update(context)

    def emit(self, kind: str, **fields):
        if self._kinds is not None and kind not in self._kinds:
            return
        record = {"kind": kind, **self._bound, **fields}
        self._stream.write(json.dumps(record) + "\n")
        self.records += 1
