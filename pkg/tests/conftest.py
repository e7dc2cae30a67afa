import os
import subprocess
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("RAPREC_DATA", ROOT / "data" / "ml-100k"))


def _locate() -> Path | None:
    if (DATA_DIR / "u.data").exists() and (DATA_DIR / "u.user").exists():
        return DATA_DIR
    try:
        subprocess.run([sys.executable, str(ROOT / "scripts" / "fetch_ml100k.py"), "--out",
                        str(DATA_DIR)], check=True, timeout=600, capture_output=True)
    except (subprocess.SubprocessError, OSError):
        return None
    return DATA_DIR if (DATA_DIR / "u.data").exists() else None


@pytest.fixture(scope="session")
def ml100k() -> Path:
    path = _locate()
    if path is None:
        pytest.skip("MovieLens-100K not available and could not be fetched")
    return path


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
