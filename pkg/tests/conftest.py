import numpy as np
import pytest
import torch

from globalrep.data import ClassId, DatasetSplit, make_synthetic_gaussian


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_gaussian():
    return make_synthetic_gaussian(4, 2, 6, 30, 3, 10, 6.0, rng_seed=11)


def make_vector_split(train, test=(), n_few=1, partitions=None):
    """Split from ``{class_name: [vectors]}`` dicts; handy for hand fixtures."""
    names = list(train)
    partitions = partitions or {}
    classes = [ClassId(n, partitions.get(n, "base")) for n in names]

    def rows(d, tag):
        xs, ys, ids = [], [], []
        for label, n in enumerate(names):
            for j, v in enumerate(d.get(n, [])):
                xs.append(np.asarray(v, dtype=np.float64).reshape(1, 1, -1))
                ys.append(label)
                ids.append(f"{n}/{tag}{j}")
        return xs, ys, ids

    dim = len(next(iter(train.values()))[0])
    tx, ty, tid = rows(train, "tr")
    ex, ey, eid = rows(dict(test), "te")
    empty = np.zeros((0, 1, 1, dim))
    return DatasetSplit(classes, np.stack(tx), ty, tid, np.stack(ex) if ex else empty, ey, eid,
                        n_few=n_few)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
