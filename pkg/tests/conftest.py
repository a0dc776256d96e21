import numpy as np
import pytest
from hypothesis import strategies as st

from htrner.net import ConvBlock, NetworkConfig
from htrner.tags import AnnotatedRecord, AnnotatedWord, PersonRole, SemanticCategory

ALPHABET = "abcdeilnorstABCJMPÀàçé·'"

transcripts = st.text(alphabet=ALPHABET, min_size=1, max_size=7)
annotated_words = st.builds(
    AnnotatedWord,
    transcripts,
    st.sampled_from(list(SemanticCategory)),
    st.sampled_from(list(PersonRole)),
)
records = st.builds(
    AnnotatedRecord,
    st.lists(annotated_words, min_size=1, max_size=8).map(tuple),
    st.just("rec"),
)


def random_record(rng: np.random.Generator, max_words: int = 8, record_id: str = "rec") -> AnnotatedRecord:
    cats, persons = list(SemanticCategory), list(PersonRole)
    words = []
    for _ in range(int(rng.integers(1, max_words + 1))):
        n = int(rng.integers(1, 8))
        text = "".join(ALPHABET[int(i)] for i in rng.integers(0, len(ALPHABET), n))
        words.append(AnnotatedWord(text, cats[int(rng.integers(6))], persons[int(rng.integers(8))]))
    return AnnotatedRecord(tuple(words), record_id)


def tiny_config(num_classes: int = 5, height: int = 8, hidden: int = 4, blocks=None, layers: int = 1) -> NetworkConfig:
    blocks = blocks or (ConvBlock(2, (3, 3), (2, 2)),)
    return NetworkConfig(num_classes, height, blocks, layers, hidden)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance report -------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def report(criterion: int, passed: bool, detail: str) -> None:
    """Record a criterion outcome; printed now and again in the terminal summary."""
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
