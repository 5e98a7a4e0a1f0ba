import os
import sys

import pytest

HERE = os.path.dirname(__file__)
sys.path.insert(0, HERE)

PROGRAMS = os.path.join(os.path.dirname(HERE), "programs")


def program_path(name: str) -> str:
    return os.path.join(PROGRAMS, name if name.endswith(".rec") else name + ".rec")


@pytest.fixture
def programs_dir():
    return PROGRAMS
