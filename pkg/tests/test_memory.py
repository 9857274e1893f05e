import multiprocessing as mp
import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from tissueflow import kernels
from tissueflow.errors import (
    CorruptManifest,
    LockHeld,
    NameGrammarViolation,
    NotFound,
    ReadOnlyStore,
    SelectorOutOfBounds,
    SizeMismatch,
    StoreUnavailable,
)
from tissueflow.memory import (
    DTYPES,
    Annotation,
    DatasetRole,
    content_hash,
    infer_role,
    open_store,
)


def test_fresh_store_is_empty(store):
    assert store.names() == []
    assert store.journal_seq == 0
    assert store.list_datasets("*") == []


def test_reopen_after_three_writes(tmp_path):
    with open_store(tmp_path / "s") as s:
        for name in ("mask2D", "volume3D", "table_x"):
            s.write_array(name, np.zeros((2, 2, 2) if name == "volume3D" else (2, 2), np.uint8))
    with open_store(tmp_path / "s") as s:
        assert len(s.list_datasets()) == 3
        assert s.journal_seq == 3


def test_round_trip_4096_bytes(store, rng):
    payload = rng.integers(0, 256, 4096, dtype=np.uint8).tobytes()
    store.write_dataset("mask2D", "u8", [64, 64], payload)
    rec = store.read_dataset("mask2D")
    assert rec.payload == payload
    assert rec.role is DatasetRole.MASK2D


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(code=st.sampled_from(sorted(DTYPES)),
       shape=st.lists(st.integers(1, 6), min_size=0, max_size=4),
       seed=st.integers(0, 2**32 - 1))
def test_round_trip_every_dtype(tmp_path_factory, code, shape, seed):
    rng = np.random.default_rng(seed)
    n = int(np.prod(shape)) * DTYPES[code].itemsize
    payload = rng.integers(0, 256, n, dtype=np.uint8).tobytes()
    with open_store(tmp_path_factory.mktemp("s")) as s:
        s.write_dataset("d", code, shape, payload)
        rec = s.read_dataset("d")
        assert rec.payload == payload
        assert rec.shape == tuple(shape)
        assert rec.content_hash == kernels.hexdigest(kernels.fnv1a64(payload))
        arr = rec.array()
        assert arr.dtype == DTYPES[code] and arr.shape == tuple(shape)


@pytest.mark.parametrize("name,rank,role", [
    ("3Dmask_20240101T000000", 3, DatasetRole.MASK3D),
    ("3Dmask_x", 3, DatasetRole.MASK3D),
    ("volume3D", 2, DatasetRole.UNKNOWN),
    ("volume3D_ct", 3, DatasetRole.VOLUME3D),
    ("table_cells", 2, DatasetRole.TABLE),
    ("mask2D", 2, DatasetRole.MASK2D),
    ("mask2D", 3, DatasetRole.UNKNOWN),
    ("4Dseries_systole", 4, DatasetRole.SERIES4D),
    ("measurement_doi", 0, DatasetRole.SCALAR),
    ("whatever", 2, DatasetRole.UNKNOWN),
])
def test_infer_role_table(name, rank, role):
    assert infer_role(name, rank) is role


@given(st.text(max_size=20), st.integers(0, 6))
def test_infer_role_total_and_deterministic(name, rank):
    assert infer_role(name, rank) is infer_role(name, rank)


def test_mask2d_rank3_accepted_but_unknown(store):
    store.write_array("mask2D", np.zeros((2, 2, 2), np.uint8))
    assert store.info("mask2D").role is DatasetRole.UNKNOWN


@pytest.mark.parametrize("bad", ["", "has space", "dash-name", "x" * 129, "ünï"])
def test_name_grammar(store, bad):
    with pytest.raises(NameGrammarViolation):
        store.write_dataset(bad, "u8", [1], b"\x00")


def test_size_mismatch(store):
    with pytest.raises(SizeMismatch):
        store.write_dataset("mask2D", "u8", [4, 4], b"\x00" * 15)
    assert "mask2D" not in store
    assert store.journal_seq == 0


def test_missing_dataset(store):
    with pytest.raises(NotFound):
        store.read_dataset("nope")


def test_overwrite_history_and_hash(store):
    store.write_array("mask2D", np.zeros((4, 4), np.uint8))
    newer = np.ones((4, 4), np.uint8)
    store.write_array("mask2D", newer)
    store.annotate(Annotation("mask2D", (2, 3), "tumor"))
    ops = [e.op for e in store.history("mask2D")]
    assert ops == ["write", "overwrite", "annotate"]
    rec = store.read_dataset("mask2D")
    assert rec.payload == newer.tobytes()
    assert rec.content_hash == store.history("mask2D")[1].content_hash
    assert store.history("unknown") == []


def test_list_datasets_sorted_glob(store):
    for name in ("4Dseries_systole", "4Dseries_diastole", "mask2D", "volume3D"):
        store.write_dataset(name, "u8", [1], b"\x01")
    assert [i.name for i in store.list_datasets("4Dseries_*")] == [
        "4Dseries_diastole", "4Dseries_systole"]
    assert [i.name for i in store.list_datasets("*mask*")] == ["mask2D"]


def test_annotation_bounds(store):
    store.write_array("mask2D", np.zeros((64, 64), np.uint8))
    before = len(store.annotations("mask2D"))
    store.annotate(Annotation("mask2D", (2, 3), "tumor"))
    assert len(store.annotations("mask2D")) == before + 1
    with pytest.raises(SelectorOutOfBounds):
        store.annotate(Annotation("mask2D", (999, 999), "tumor"))
    with pytest.raises(NotFound):
        store.annotate(Annotation("nothing", (0,), "x"))


def test_annotations_persist(tmp_path):
    with open_store(tmp_path / "s") as s:
        s.write_array("table_x", np.zeros((5, 2)))
        s.annotate(Annotation("table_x", (4,), "label with\ttab", actor="dr x"))
    with open_store(tmp_path / "s", readonly=True) as s:
        (ann,) = s.annotations("table_x")
        assert ann.selector == (4,) and ann.label == "label with\ttab" and ann.actor == "dr x"


def test_journal_seq_strictly_increasing(store):
    for k in range(5):
        store.write_array(f"d{k % 2}", np.full((2,), k, np.int32))
    seqs = [e.seq for e in store.journal()]
    assert seqs == sorted(set(seqs)) == list(range(1, 6))


def test_journal_hash_is_fnv_of_payload(store):
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    entry = store.write_array("table_f", arr)
    assert entry.content_hash == content_hash(arr.tobytes())


def test_truncated_payload_rejected(tmp_path):
    with open_store(tmp_path / "s") as s:
        s.write_array("mask2D", np.ones((8, 8), np.uint8))
        path = s.payload_path("mask2D")
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(CorruptManifest):
        open_store(tmp_path / "s")


def test_torn_manifest_tail_is_dropped(tmp_path):
    with open_store(tmp_path / "s") as s:
        s.write_array("mask2D", np.ones((2, 2), np.uint8))
    with open(tmp_path / "s" / "manifest.tsv", "a") as fh:
        fh.write("half_written\tu8\t1")  # no newline: interrupted append
    with open_store(tmp_path / "s") as s:
        assert s.names() == ["mask2D"]


def test_stream_larger_than_read_buffer(store):
    chunk = bytes(range(256)) * 4096  # 1 MiB
    n_chunks = 5
    store.write_stream("volume3D_big", "u8", [n_chunks, 1024, 1024], (chunk for _ in range(n_chunks)))
    h = kernels.FNV_OFFSET
    total = 0
    for part in store.read_stream("volume3D_big", chunk_size=65536):
        assert len(part) <= 65536
        h = kernels.fnv1a64(part, h)
        total += len(part)
    assert total == n_chunks * len(chunk)
    assert kernels.hexdigest(h) == store.info("volume3D_big").content_hash


def test_readonly_handle(tmp_path):
    with open_store(tmp_path / "s") as s:
        s.write_array("mask2D", np.ones((2, 2), np.uint8))
        with open_store(tmp_path / "s", readonly=True) as ro:
            assert ro.names() == ["mask2D"]
            with pytest.raises(ReadOnlyStore):
                ro.write_array("x", np.ones(1))
    with pytest.raises(StoreUnavailable):
        open_store(tmp_path / "missing", readonly=True)


def test_second_writer_refused(tmp_path):
    with open_store(tmp_path / "s"):
        with pytest.raises(LockHeld):
            open_store(tmp_path / "s")
    open_store(tmp_path / "s").close()


def _try_open(path, barrier, results):
    barrier.wait()
    try:
        s = open_store(path)
    except LockHeld:
        results.put("locked")
        return
    results.put("opened")
    try:
        barrier.wait()  # hold the lock until the parent releases it
    except threading.BrokenBarrierError:
        pass
    s.close()


def test_single_writer_across_processes(tmp_path):
    ctx = mp.get_context("fork")
    barrier = ctx.Barrier(4)
    results = ctx.Queue()
    path = tmp_path / "s"
    open_store(path).close()
    procs = [ctx.Process(target=_try_open, args=(path, barrier, results)) for _ in range(4)]
    for p in procs:
        p.start()
    outcomes = [results.get(timeout=30) for _ in procs]
    barrier.abort()  # release the holder; losers have already exited
    for p in procs:
        p.join(timeout=30)
    assert sorted(outcomes) == ["locked", "locked", "locked", "opened"]


def test_replay_and_verify(store):
    store.write_array("a", np.ones(3))
    store.write_array("b", np.zeros(2))
    store.write_array("a", np.full(3, 2.0))
    assert store.replay_journal() == store.current_state()
    assert store.verify() == []


def test_digest_ignores_timestamps_only(tmp_path):
    digests = []
    for k in range(2):
        with open_store(tmp_path / f"s{k}") as s:
            s.write_array("a", np.ones(3), attrs={"timestamp": f"t{k}", "unit": "mm"})
            digests.append(s.digest())
    assert digests[0] == digests[1]
    with open_store(tmp_path / "s0") as s:
        s.write_array("a", np.ones(3), attrs={"unit": "um"})
        assert s.digest() != digests[0]


def test_gc_keeps_latest(store):
    store.write_array("a", np.ones(3))
    store.write_array("a", np.zeros(3))
    store.write_array("b", np.ones(2))
    assert store.gc() == 1
    assert np.array_equal(store.read_array("a"), np.zeros(3))
    assert [e.op for e in store.history("a")] == ["write", "overwrite"]
    assert store.verify() == []


def test_ledger_round_trip(store):
    store.append_ledger("feedback", ["t", "actor", "tool\tA", "accept", "ctx"])
    assert store.read_ledger("feedback") == [["t", "actor", "tool\tA", "accept", "ctx"]]
    assert store.history("feedback")[0].op == "annotate"
