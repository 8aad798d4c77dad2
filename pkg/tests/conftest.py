import pytest

from attrcloak.data import SyntheticSpec, generate_dataset
from attrcloak.models import WHITEBOX, HELDOUT, calibrate_threshold, train_attribute_net, train_embedding_net


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(SyntheticSpec())


@pytest.fixture(scope="session")
def attribute_net(dataset):
    net, report = train_attribute_net(dataset)
    return net, report


@pytest.fixture(scope="session")
def embedders(dataset):
    wb, _ = train_embedding_net(dataset, variant=WHITEBOX)
    ho, _ = train_embedding_net(dataset, variant=HELDOUT)
    return wb, ho, calibrate_threshold(wb, dataset)


# acceptance verdicts, filled by test_acceptance.py and echoed in the terminal summary
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")


@pytest.fixture(scope="session")
def acceptance():
    def record(n: int, title: str, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (title, ok, detail)
        print(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
    return record
