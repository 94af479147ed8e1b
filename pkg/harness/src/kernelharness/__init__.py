"""Single-job execution harness for the kernel evaluation wire protocol."""
from .cli import serve_job
from .protocol import (EXIT_REPLY, EXIT_UNPARSEABLE, HarnessError, JobError,
                       JobSpec)

__all__ = ["serve_job", "EXIT_REPLY", "EXIT_UNPARSEABLE", "HarnessError",
           "JobError", "JobSpec"]
