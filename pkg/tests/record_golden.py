"""Regenerate the files under tests/golden.

Run only after a change that is meant to alter recorded outputs; every test
that reads these files then pins the new behaviour.
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

import golden_cases  # noqa: E402

OUT = Path(__file__).parent / "golden"


def main():
    OUT.mkdir(exist_ok=True)
    for name, make in golden_cases.CASES.items():
        value = make()
        if name.endswith(".npy"):
            np.save(OUT / name, value)
        else:
            (OUT / name).write_bytes(value)
        print("wrote", name)


if __name__ == "__main__":
    main()
