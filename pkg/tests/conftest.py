import os
from pathlib import Path

import pytest

from invforge.data import MNIST_FILES

ROOT = Path(__file__).resolve().parents[1]


def mnist_dir() -> Path:
    return Path(os.environ.get("INVFORGE_MNIST_DIR", ROOT / "data" / "mnist"))


def have_mnist() -> bool:
    d = mnist_dir()
    return all((d / n).exists() or (d / (n + ".gz")).exists() for pair in MNIST_FILES.values() for n in pair)


@pytest.fixture(scope="session")
def mnist_path():
    if not have_mnist():
        pytest.skip(f"MNIST IDX files not found in {mnist_dir()} (set INVFORGE_MNIST_DIR)")
    return mnist_dir()


ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
