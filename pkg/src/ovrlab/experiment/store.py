"""Crash-safe append-only session logs.

Each session is one JSONL file.  Every line wraps a payload in
{"crc": <crc32 of canonical payload JSON>, "record": <payload>} so that a
torn tail (power loss mid-write) is detectable: replay stops at the first
line that fails to parse or whose checksum mismatches, and the next append
truncates the file back to the last valid prefix before writing.  Appends
flush and fsync before returning, so an acknowledged write survives a crash.
"""

from __future__ import annotations

import json
import os
import zlib
from pathlib import Path


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def _crc(payload) -> int:
    return zlib.crc32(_canonical(payload).encode("utf-8")) & 0xFFFFFFFF


class RecordStore:
    """Append-only JSONL log with per-record checksums."""

    def __init__(self, path):
        self.path = Path(path)
        self._valid_bytes = 0
        self._records = []
        self._replay()

    def _replay(self):
        self._records = []
        self._valid_bytes = 0
        if not self.path.exists():
            return
        offset = 0
        with open(self.path, "rb") as fh:
            for line in fh:
                if not line.endswith(b"\n"):
                    break  # torn tail
                try:
                    wrapper = json.loads(line.decode("utf-8"))
                    payload = wrapper["record"]
                    if int(wrapper["crc"]) != _crc(payload):
                        break
                except (ValueError, KeyError, TypeError, UnicodeDecodeError):
                    break
                offset += len(line)
                self._records.append(payload)
        self._valid_bytes = offset

    @property
    def records(self):
        return list(self._records)

    def append(self, payload) -> None:
        wrapper = {"crc": _crc(payload), "record": payload}
        line = json.dumps(wrapper, sort_keys=True, separators=(",", ":")) + "\n"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        # Truncate away any torn tail so the log stays a clean prefix of
        # valid records, then append and force to disk before acknowledging.
        with open(self.path, "ab") as fh:
            fh.truncate(self._valid_bytes)
            fh.seek(0, os.SEEK_END)
            data = line.encode("utf-8")
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
            self._valid_bytes += len(data)
        self._records.append(payload)
