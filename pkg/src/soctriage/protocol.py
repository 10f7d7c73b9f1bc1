"""Line-delimited JSON over a child process's stdin/stdout.

Shared by the external scorer, fidelity evaluator, router backend and expert
kinds. Each request carries an ``id``; responses may come back in any order but
must echo it.
"""
from __future__ import annotations

import json
import logging
import queue
import shlex
import subprocess
import threading
from typing import Any, Dict, List, Optional, Sequence, Union

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 10.0


class ProtocolError(RuntimeError):
    """The child violated the protocol, timed out, or died."""


class LineProcess:
    """One child process with at most one request in flight."""

    def __init__(self, command: Union[str, Sequence[str]], timeout: float = DEFAULT_TIMEOUT_S):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._pending: Dict[str, Dict[str, Any]] = {}
        self._lock = threading.Lock()

    def _start(self):
        try:
            self._proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ProtocolError(f"cannot start {self.argv[0]!r}: {exc}") from exc
        self._lines = queue.Queue()
        self._pending = {}
        threading.Thread(target=self._pump, args=(self._proc, self._lines), daemon=True).start()

    @staticmethod
    def _pump(proc: subprocess.Popen, sink: "queue.Queue[Optional[str]]"):
        assert proc.stdout is not None
        for line in proc.stdout:
            sink.put(line)
        sink.put(None)

    def request(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        rid = str(payload["id"])
        with self._lock:
            if self._proc is None or self._proc.poll() is not None:
                self._start()
            assert self._proc is not None and self._proc.stdin is not None
            try:
                self._proc.stdin.write(json.dumps(payload, sort_keys=True) + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                self._kill()
                raise ProtocolError(f"child closed stdin: {exc}") from exc
            return self._await(rid)

    def _await(self, rid: str) -> Dict[str, Any]:
        if rid in self._pending:
            return self._pending.pop(rid)
        while True:
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                self._kill()
                raise ProtocolError(f"timeout after {self.timeout}s waiting for id {rid!r}")
            if line is None:
                self._kill()
                raise ProtocolError("child exited before responding")
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
            except ValueError as exc:
                self._kill()
                raise ProtocolError(f"non-JSON response line: {line[:80]!r}") from exc
            if not isinstance(msg, dict) or "id" not in msg:
                self._kill()
                raise ProtocolError("response without id")
            if str(msg["id"]) == rid:
                return msg
            self._pending[str(msg["id"])] = msg

    def _kill(self):
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=1)
            except (OSError, subprocess.TimeoutExpired):
                pass
        self._proc = None

    def close(self):
        with self._lock:
            if self._proc is not None and self._proc.stdin is not None:
                try:
                    self._proc.stdin.close()
                    self._proc.wait(timeout=1)
                except (OSError, subprocess.TimeoutExpired):
                    pass
            self._kill()


class ProcessPool:
    """Thread-safe facade over ``size`` child processes running the same command."""

    def __init__(self, command: Union[str, Sequence[str]], size: int = 1, timeout: float = DEFAULT_TIMEOUT_S):
        if size < 1:
            raise ValueError("pool size must be >= 1")
        self._workers: List[LineProcess] = [LineProcess(command, timeout) for _ in range(size)]
        self._free: "queue.Queue[LineProcess]" = queue.Queue()
        for w in self._workers:
            self._free.put(w)

    def request(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        worker = self._free.get()
        try:
            return worker.request(payload)
        finally:
            self._free.put(worker)

    def close(self):
        for w in self._workers:
            w.close()


_pools: Dict[tuple, ProcessPool] = {}
_pools_lock = threading.Lock()


def shared_pool(command: Union[str, Sequence[str]], size: int = 1, timeout: float = DEFAULT_TIMEOUT_S) -> ProcessPool:
    key = (command if isinstance(command, str) else tuple(command), size, timeout)
    with _pools_lock:
        pool = _pools.get(key)
        if pool is None:
            pool = _pools[key] = ProcessPool(command, size, timeout)
        return pool


def close_shared_pools():
    with _pools_lock:
        for pool in _pools.values():
            pool.close()
        _pools.clear()
