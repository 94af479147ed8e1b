"""Acceptance: protocol conformance over a real process boundary, then the
orchestrator driving this harness end to end."""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

HARNESS_SRC = Path(__file__).resolve().parents[1] / "src"

REF_RELU = "import numpy as np\n\ndef kernel(x):\n    return np.maximum(x, 0.0)\n"
OFF_BY_ONE = "import numpy as np\n\ndef kernel(x):\n    return np.maximum(x, 0.0) + 1.0\n"

COUNTING_CANDIDATE = """\
import pathlib
COUNT_PATH = pathlib.Path({path!r})
state = {{"calls": 0}}

def kernel(x):
    state["calls"] += 1
    COUNT_PATH.write_text(str(state["calls"]))
    return x * 1.0
"""


def child_env():
    env = dict(os.environ)
    env["PYTHONPATH"] = str(HARNESS_SRC) + os.pathsep + env.get("PYTHONPATH", "")
    return env


def run_harness(stdin_text):
    proc = subprocess.run([sys.executable, "-m", "kernelharness"],
                          input=stdin_text, capture_output=True, text=True,
                          env=child_env(), timeout=60)
    return proc


def stub_job(candidate, reference=REF_RELU, **over):
    job = {
        "job_id": "acceptance",
        "mode": "evaluate_stub",
        "reference_source": reference,
        "candidate_source": candidate,
        "input_spec": [{"shape": [64], "dtype": "f32", "distribution": "normal"}],
        "rtol": 1e-3,
        "atol": 1e-3,
        "trials": 2,
        "seed": 1000,
        "warmup_iters": 1,
        "timed_iters": 3,
        "timeout_s": 30.0,
        "isolation": True,
    }
    job.update(over)
    return job


def test_criterion_harness_protocol_conformance(tmp_path):
    started = time.monotonic()

    # identical candidate: correct with a literally zero error
    proc = run_harness(json.dumps(stub_job(REF_RELU)))
    assert proc.returncode == 0, proc.stderr
    reply = json.loads(proc.stdout)
    assert reply["status"] == "correct"
    assert reply["max_abs_err"] == 0

    # off-by-one candidate: mismatch on the very first trial's seed
    proc = run_harness(json.dumps(stub_job(OFF_BY_ONE)))
    assert proc.returncode == 0
    reply = json.loads(proc.stdout)
    assert reply["status"] == "mismatch"
    assert reply["failing_seed"] == 1001
    assert reply["candidate_time_s"] is None

    # syntax error: compile_error with something to read in diagnostics
    proc = run_harness(json.dumps(stub_job("def kernel(x:\n")))
    assert proc.returncode == 0
    reply = json.loads(proc.stdout)
    assert reply["status"] == "compile_error"
    assert reply["diagnostics"].strip()

    # malformed input: exit 3, still exactly one JSON document
    proc = run_harness("this is not a job")
    assert proc.returncode == 3
    assert "error" in json.loads(proc.stdout)

    # timing fields are real measurements and warm-up is actually run:
    # an iteration-counting candidate sees trials + warmup + timed calls
    count_path = tmp_path / "calls.txt"
    counting = COUNTING_CANDIDATE.format(path=str(count_path))
    identity = "def kernel(x):\n    return x * 1.0\n"
    job = stub_job(counting, reference=identity,
                   trials=2, warmup_iters=3, timed_iters=4)
    proc = run_harness(json.dumps(job))
    reply = json.loads(proc.stdout)
    assert reply["status"] == "correct", reply["diagnostics"]
    assert reply["reference_time_s"] > 0
    assert reply["candidate_time_s"] > 0
    assert reply["candidate_time_std_s"] >= 0
    assert int(count_path.read_text()) == 2 + 3 + 4

    # raising warmup_iters by 3 adds exactly 3 more candidate calls
    job = stub_job(counting, reference=identity,
                   trials=2, warmup_iters=6, timed_iters=4)
    proc = run_harness(json.dumps(job))
    assert json.loads(proc.stdout)["status"] == "correct"
    assert int(count_path.read_text()) == 2 + 6 + 4

    assert time.monotonic() - started < 30.0


def test_criterion_cross_component_smoke(tmp_path, monkeypatch):
    from kernelagent.evaluation import (CorrectnessConfig, EvalStatus,
                                        SubprocessExecutor, TimingConfig)
    from kernelagent.model import (ScriptedModelClient, ScriptedResponseSet,
                                   read_journal)
    from kernelagent.profiling import ProfilingSchedule, WorkloadClass
    from kernelagent.prompts import PromptKind
    from kernelagent.session import run_session
    from kernelagent.task import InputTensorSpec, TaskSpec
    from kernelagent.workflow import Budget, Phase

    monkeypatch.setenv("PYTHONPATH", child_env()["PYTHONPATH"])
    # the harness writes its canned profile CSVs into the child's TMPDIR;
    # point it at pytest's tmp dir so nothing leaks
    monkeypatch.setenv("TMPDIR", str(tmp_path))

    ref_path = tmp_path / "reference.py"
    ref_path.write_text(REF_RELU)
    task = TaskSpec(
        task_id="relu-stub",
        workload_class=WorkloadClass.ACTIVATION_ELEMENTWISE,
        reference_source_path=ref_path,
        input_spec=(InputTensorSpec(shape=(64,)),),
        correctness=CorrectnessConfig(num_random_trials=2),
        timing=TimingConfig(warmup_iters=1, timed_iters=3),
        execution_mode="evaluate_stub",
    )

    def fenced(source):
        return f"```python\n{source}```\n"

    rewrite_1 = ("import numpy as np\n\n"
                 "def kernel(x):\n"
                 "    return np.where(x > 0, x, 0.0).astype(np.float32)\n")
    rewrite_2 = ("import numpy as np\n\n"
                 "def kernel(x):\n"
                 "    out = x.copy()\n"
                 "    np.maximum(out, 0.0, out=out)\n"
                 "    return out\n")
    model = ScriptedModelClient(ScriptedResponseSet(responses={
        PromptKind.INITIAL_SYNTHESIS: [fenced(REF_RELU)],
        PromptKind.OPTIMIZATION: [fenced(rewrite_1), fenced(rewrite_2)],
    }))

    record = run_session(
        task=task,
        budget=Budget(max_depth=2),
        model=model,
        executor=SubprocessExecutor(f"{sys.executable} -m kernelharness"),
        schedule=ProfilingSchedule.default(),
        out_root=tmp_path / "sessions",
        session_id="relu-stub-smoke",
    )

    assert record.terminal_phase is Phase.DONE
    assert [p.depth for p in record.trajectory] == [0, 1, 2]
    assert all(p.correct for p in record.trajectory)
    assert [v.depth_at_creation for v in record.versions] == [0, 1, 2]
    for version in record.versions:
        report = record.reports[version.id]
        assert report.status is EvalStatus.CORRECT
        assert report.candidate_time > 0
        assert report.speedup > 0

    # the harness's canned profile made it through the subprocess boundary
    # into both optimization prompts (elementwise schedule starts at depth 1)
    calls = read_journal(tmp_path / "sessions" / "relu-stub-smoke" / "calls")
    opt_prompts = [c.request_text for c in calls
                   if c.kind is PromptKind.OPTIMIZATION]
    assert len(opt_prompts) == 2
    for prompt in opt_prompts:
        assert "PROFILING SUMMARY" in prompt
        assert "memory throughput:   91.5%" in prompt
