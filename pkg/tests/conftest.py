import random

import pytest

from iovstore.store import CommitRequest, Store


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)


def build_demo_store(path) -> Store:
    """Small hand-built store with a two-level tag tree and mixed payloads.

    Layout: partition det owns det/{a,b}; folders a/f1 (2 channels), a/f2,
    b/f3. Leaf tags v1 everywhere except f3 which uses v2. Global tag
    GLOBAL-A resolves through DET -> {A1, B1}.
    """
    store = Store.initialize(path)
    store.create_partition("det", "OFFLINE", "det")
    store.create_folder("det", "det/a/f1", "schema-a", [0, 1])
    store.create_folder("det", "det/a/f2", "schema-a", [0])
    store.create_folder("det", "det/b/f3", "schema-b", [0])
    for since, blob in ((0, b"f1c0-epoch0"), (100, b"f1c0-epoch1"), (250, b"f1c0-epoch2")):
        store.commit(CommitRequest("det/a/f1", 0, "v1", since, inline_data=blob))
    store.commit(CommitRequest("det/a/f1", 1, "v1", 0, inline_data=b"f1c1-epoch0"))
    store.commit(CommitRequest("det/a/f2", 0, "v1", 0, inline_data=b"f2-epoch0"))
    store.commit(CommitRequest("det/a/f2", 0, "v1", 500, inline_data=b"f2-epoch1"))
    store.commit(CommitRequest("det/b/f3", 0, "v2", 10, inline_data=b"f3-epoch0"))
    store.define_tag("det/a", "A1", {"f1": "v1", "f2": "v1"})
    store.define_tag("det/b", "B1", {"f3": "v2"})
    store.define_tag("det", "DET", {"a": "A1", "b": "B1"})
    store.define_tag("", "GLOBAL-A", {"det": "DET"})
    return store


@pytest.fixture
def demo_store(tmp_path) -> Store:
    return build_demo_store(tmp_path / "demo-store")
