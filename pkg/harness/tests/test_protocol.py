import pytest

from kernelharness.protocol import (HarnessError, JobError, JobSpec,
                                    make_reply, parse_job)


def base_job(**over):
    job = {
        "job_id": "job-1",
        "mode": "evaluate_stub",
        "reference_source": "def kernel(x):\n    return x\n",
        "candidate_source": "def kernel(x):\n    return x\n",
        "input_spec": [{"shape": [8], "dtype": "f32", "distribution": "normal"}],
        "rtol": 1e-3,
        "atol": 1e-3,
        "trials": 2,
        "seed": 1000,
        "warmup_iters": 1,
        "timed_iters": 2,
        "timeout_s": 30.0,
        "isolation": True,
    }
    job.update(over)
    return job


class TestParseJob:
    def test_accepts_minimal_job(self):
        assert parse_job('{"job_id": "j"}')["job_id"] == "j"

    def test_rejects_non_json(self):
        with pytest.raises(JobError, match="not valid JSON"):
            parse_job("definitely not json {")

    def test_rejects_empty_input(self):
        with pytest.raises(JobError):
            parse_job("")

    def test_rejects_non_object(self):
        with pytest.raises(JobError, match="must be a JSON object"):
            parse_job("[1, 2, 3]")

    def test_rejects_missing_job_id(self):
        with pytest.raises(JobError, match="job_id"):
            parse_job('{"mode": "evaluate_stub"}')

    def test_rejects_blank_job_id(self):
        with pytest.raises(JobError, match="job_id"):
            parse_job('{"job_id": ""}')


class TestJobSpec:
    def test_round_trips_all_fields(self):
        spec = JobSpec.from_dict(base_job(profile=True))
        assert spec.job_id == "job-1"
        assert spec.mode == "evaluate_stub"
        assert spec.inputs[0].shape == (8,)
        assert spec.trials == 2
        assert spec.seed == 1000
        assert spec.isolation is True
        assert spec.profile is True

    def test_profile_defaults_off(self):
        assert JobSpec.from_dict(base_job()).profile is False

    @pytest.mark.parametrize("key,value", [
        ("mode", "train"),
        ("reference_source", 7),
        ("candidate_source", None),
        ("rtol", 0.0),
        ("atol", -1e-3),
        ("trials", 0),
        ("seed", -1),
        ("warmup_iters", 0),
        ("timed_iters", 0),
        ("timeout_s", 0),
        ("isolation", "yes"),
        ("input_spec", []),
        ("input_spec", [{"shape": []}]),
        ("input_spec", [{"shape": [0]}]),
        ("input_spec", [{"shape": [4], "dtype": "f64"}]),
        ("input_spec", [{"shape": [4], "distribution": "poisson"}]),
    ])
    def test_rejects_bad_field(self, key, value):
        with pytest.raises(HarnessError):
            JobSpec.from_dict(base_job(**{key: value}))

    def test_warmup_must_be_at_least_one(self):
        # timing without warm-up is not a supported configuration
        with pytest.raises(HarnessError, match="warmup_iters"):
            JobSpec.from_dict(base_job(warmup_iters=0))

    def test_trials_rejects_boolean(self):
        with pytest.raises(HarnessError, match="trials"):
            JobSpec.from_dict(base_job(trials=True))


class TestMakeReply:
    FIELDS = {"job_id", "status", "diagnostics", "max_abs_err", "max_rel_err",
              "failing_seed", "reference_time_s", "candidate_time_s",
              "candidate_time_std_s"}

    def test_every_reply_carries_the_full_key_set(self):
        reply = make_reply("j", "compile_error", diagnostics="nope")
        assert set(reply) == self.FIELDS

    def test_profile_path_is_the_only_optional_key(self):
        reply = make_reply("j", "correct", reference_time_s=1e-3,
                           candidate_time_s=1e-3, candidate_time_std_s=0.0,
                           profile_csv_path="/tmp/p.csv")
        assert set(reply) == self.FIELDS | {"profile_csv_path"}

    def test_correct_requires_timing(self):
        with pytest.raises(ValueError, match="timing"):
            make_reply("j", "correct", reference_time_s=1e-3)

    def test_failures_must_not_carry_timing(self):
        with pytest.raises(ValueError):
            make_reply("j", "mismatch", candidate_time_s=1e-3)

    def test_unknown_status_rejected(self):
        with pytest.raises(ValueError, match="status"):
            make_reply("j", "sorta_correct")

    def test_long_diagnostics_are_clipped(self):
        reply = make_reply("j", "runtime_error", diagnostics="x" * 60_000)
        assert len(reply["diagnostics"]) < 25_000
        assert reply["diagnostics"].endswith("truncated ...]")
