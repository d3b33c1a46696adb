#!/usr/bin/env python3
"""Run the acceptance suite standalone, one PASS/FAIL line per criterion.

Equivalent to `pytest tests/test_acceptance.py -v -s`, but prints only the
criterion lines and a summary, and exits nonzero if anything failed.
"""

import pathlib
import sys
import tempfile
import traceback

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "tests"))
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

import test_acceptance as acc  # noqa: E402


def main() -> int:
    criteria = sorted(name for name in dir(acc) if name.startswith("test_criterion"))
    failures = 0
    for name in criteria:
        fn = getattr(acc, name)
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as tmp:
                    fn(pathlib.Path(tmp))
            else:
                fn()
        except AssertionError:
            failures += 1
        except Exception:
            failures += 1
            traceback.print_exc()
    total = len(criteria)
    print(f"\n{total - failures}/{total} acceptance criteria passed")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
