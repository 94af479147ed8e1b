"""Process entry point: one evaluation job per invocation, stdin to stdout.

The invariant this module defends is totality: whatever arrives on stdin,
exactly one JSON document goes to stdout and the exit code is 0 (a reply
was produced) or 3 (the input was not a job). User code runs with stdout
redirected to stderr so a printing kernel cannot corrupt the reply stream.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import signal
import sys
import threading
import traceback
from typing import Dict, List, Optional, TextIO

from .protocol import (EXIT_REPLY, EXIT_UNPARSEABLE, HarnessError, JobError,
                       JobSpec, make_reply, parse_job)
from .stub import run_stub


class _JobTimeout(BaseException):
    # BaseException so the per-call `except Exception` guards in the runners
    # cannot swallow an expired timer
    pass


def _arm_timer(seconds: float):
    """Turn a hung candidate into a reportable failure. SIGALRM is only
    deliverable on the main thread of a Unix process; elsewhere the parent's
    own process timeout is the backstop."""
    if not hasattr(signal, "setitimer"):
        return None
    if threading.current_thread() is not threading.main_thread():
        return None

    def _fire(signum, frame):
        raise _JobTimeout()

    previous = signal.signal(signal.SIGALRM, _fire)
    signal.setitimer(signal.ITIMER_REAL, seconds)
    return previous


def _disarm_timer(previous) -> None:
    signal.setitimer(signal.ITIMER_REAL, 0.0)
    signal.signal(signal.SIGALRM, previous)


def run_job(raw: Dict) -> Dict:
    job = JobSpec.from_dict(raw)
    if job.mode == "evaluate_stub":
        runner = run_stub
    else:
        from .torch_runner import run_evaluate
        runner = run_evaluate
    previous = _arm_timer(job.timeout_s)
    try:
        with contextlib.redirect_stdout(sys.stderr):
            return runner(job)
    finally:
        if previous is not None:
            _disarm_timer(previous)


def serve_job(stdin_text: str, stdout: TextIO) -> int:
    try:
        raw = parse_job(stdin_text)
    except JobError as e:
        json.dump({"error": str(e)}, stdout)
        stdout.write("\n")
        return EXIT_UNPARSEABLE

    try:
        reply = run_job(raw)
    except _JobTimeout:
        reply = make_reply(
            raw["job_id"], "runtime_error",
            diagnostics=f"job exceeded its timeout of {raw.get('timeout_s')} s")
    except HarnessError as e:
        reply = make_reply(raw["job_id"], "runtime_error", diagnostics=str(e))
    except Exception:
        # the reply must stay well-formed even when the harness itself breaks
        reply = make_reply(raw["job_id"], "runtime_error",
                           diagnostics=traceback.format_exc())
    json.dump(reply, stdout)
    stdout.write("\n")
    return EXIT_REPLY


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="kernel-harness",
        description="Run one kernel evaluation job: JSON job on stdin, "
                    "JSON reply on stdout.")
    parser.parse_args(argv)
    # read bytes and decode leniently; undecodable input must still reach
    # the exit-3 path rather than crash
    text = sys.stdin.buffer.read().decode("utf-8", errors="replace")
    return serve_job(text, sys.stdout)
