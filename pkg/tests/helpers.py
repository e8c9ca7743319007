from pathlib import Path

import numpy as np
import pytest

GOLDEN = Path(__file__).parent / "golden"


def rel_err(a, n):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-7)


def central_diff(f, arr, idx, h=1e-4):
    """Central difference of scalar ``f()`` w.r.t. ``arr[idx]`` (arr mutated and restored)."""
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    down = f()
    arr[idx] = old
    return (up - down) / (2 * h)


def golden_bytes(name: str) -> bytes:
    path = GOLDEN / name
    if not path.exists():
        pytest.fail(f"golden file {name} missing; run tests/record_golden.py")
    return path.read_bytes()


def golden_array(name: str) -> np.ndarray:
    golden_bytes(name)
    return np.load(GOLDEN / name)


# one line per acceptance criterion, printed in the terminal summary by conftest
CRITERIA: dict[int, str] = {}


class criterion:
    """Record PASS/FAIL for acceptance criterion ``number`` around a block of assertions."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:>2} {status}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        if exc_type is not None and exc_type is not AssertionError:
            line += f" [{exc_type.__name__}: {exc}]"
        CRITERIA[self.number] = line
        print(line)
        return False
