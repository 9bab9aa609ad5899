"""Console entry point.

Thread pinning must happen before numpy is imported anywhere in the process,
so this module parses --threads by hand and sets the BLAS environment first.
The real argument parsing lives in cli.py.
"""

import os
import sys

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _peek_threads(argv):
    for i, a in enumerate(argv):
        if a == "--threads" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--threads="):
            return a.split("=", 1)[1]
    return None


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = _peek_threads(argv)
    if threads is not None:
        try:
            n = int(threads)
        except ValueError:
            print(f"error: --threads expects an integer, got {threads!r}",
                  file=sys.stderr)
            return 2
        if n < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(n)
    from .cli import run
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
