import numpy as np
import pytest

from sorex.graphs import DatasetSplit, build_joint_graph

# Hand-checkable toy graph used throughout the suite:
#   users u0, u1, u2; items v0, v1
#   interactions u0-v0, u1-v0, u1-v1, u2-v1
#   social u0-u1, u1-u2
TOY_INTERACTIONS = [(0, 0), (1, 0), (1, 1), (2, 1)]
TOY_SOCIAL = [(0, 1), (1, 2)]


@pytest.fixture
def toy_graph():
    return build_joint_graph(
        3, 2, TOY_INTERACTIONS, TOY_SOCIAL,
        user_labels=["u0", "u1", "u2"], item_labels=["v0", "v1"])


@pytest.fixture
def toy_split(toy_graph):
    """Full-graph training split: every toy interaction is a train edge."""
    train = np.asarray(TOY_INTERACTIONS, dtype=np.int64)
    empty = np.zeros((0, 2), dtype=np.int64)
    return DatasetSplit(train, empty, empty, seed=0, ratios=(1.0, 0.0, 0.0))


def write_tsv(path, rows, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(str(x) for x in row) + "\n")
    return path


@pytest.fixture
def toy_files(tmp_path):
    inter = write_tsv(tmp_path / "ratings.tsv",
                      [("u0", "v0"), ("u1", "v0"), ("u1", "v1"), ("u2", "v1")])
    social = write_tsv(tmp_path / "trust.tsv", [("u0", "u1"), ("u1", "u2")])
    return inter, social


def pytest_runtest_logreport(report):
    """One visible verdict line per acceptance test, whatever -v says."""
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call":
        verdict = "PASS" if report.passed else \
            ("SKIP" if report.skipped else "FAIL")
    elif report.when == "setup" and (report.skipped or report.failed):
        verdict = "SKIP" if report.skipped else "FAIL"
    else:
        return
    reason = ""
    if verdict == "SKIP" and isinstance(report.longrepr, tuple):
        reason = f"  ({report.longrepr[2].removeprefix('Skipped: ')})"
    print(f"\n[{verdict}] {name}{reason}", flush=True)
