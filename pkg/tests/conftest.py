import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def corpus_root() -> Path:
    return FIXTURES / "corpus"


def load_program(name: str) -> str:
    return (FIXTURES / "programs" / name).read_text(encoding="utf-8")


def load_witness_text(name: str) -> str:
    return (FIXTURES / "witnesses" / name).read_text(encoding="utf-8")


def load_witness_json(name: str) -> dict:
    return json.loads(load_witness_text(name))
