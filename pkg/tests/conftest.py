import json
import sys
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
sys.path.insert(0, str(Path(__file__).parent))

from guidebench.doctree import NormalizedDocument, build_tree, resolve_cross_refs  # noqa: E402


@pytest.fixture(scope="session")
def fixture_document() -> NormalizedDocument:
    return NormalizedDocument.from_dict(
        json.loads((FIXTURES / "document.json").read_text()))


@pytest.fixture(scope="session")
def fixture_tree(fixture_document):
    return resolve_cross_refs(build_tree(fixture_document), fixture_document)


@pytest.fixture(scope="session")
def golden_tree_dict() -> dict:
    return json.loads((FIXTURES / "golden_tree.json").read_text())
