import numpy as np
import pytest

from mme.errors import EmptyTrace
from mme.hashing import embed_call_arguments
from mme.sequence import (ApiCallEvent, ApiTrace, embed_call, embed_dataset,
                          embed_sequence, load_dataset, load_traces,
                          save_dataset, save_traces)
from mme.transe import api_vector


def make_trace(calls, trace_id="t0", y=1, family=1, timestamp="2020-01"):
    return ApiTrace(trace_id=trace_id, calls=tuple(calls), y=y, family=family,
                    timestamp=timestamp)


def test_trace_invariants():
    call = ApiCallEvent("Foo")
    with pytest.raises(EmptyTrace):
        make_trace([])
    with pytest.raises(ValueError):
        make_trace([call], y=0, family=3)  # benign must have family 0
    with pytest.raises(ValueError):
        make_trace([call], y=1, family=0)
    with pytest.raises(ValueError):
        make_trace([call], timestamp="2020-13")
    with pytest.raises(ValueError):
        make_trace([call], timestamp="202001")
    with pytest.raises(ValueError):
        ApiCallEvent("")


def test_embed_call_unknown_api_no_args(fixture_table):
    call = ApiCallEvent("NotInGraph", ())
    vec = embed_call(call, fixture_table, n_bins=16)
    assert vec.shape == (fixture_table.dim + 16,)
    assert np.all(vec == 0)


def test_embed_call_known_api_no_args(fixture_table):
    call = ApiCallEvent("RegOpenKeyEx", ())
    vec = embed_call(call, fixture_table, n_bins=16)
    assert np.array_equal(vec[:fixture_table.dim],
                          api_vector(fixture_table, "RegOpenKeyEx"))
    assert np.all(vec[fixture_table.dim:] == 0)


def test_embed_call_composes_module_oracles(fixture_table):
    call = ApiCallEvent("RegSetValueEx",
                        (("int", 2), ("str", "C:\\User\\Admin\\AppData\\x.bin")))
    vec = embed_call(call, fixture_table, n_bins=32, hash_seed=9)
    assert vec.shape == (fixture_table.dim + 32,)
    assert np.array_equal(vec[:fixture_table.dim],
                          api_vector(fixture_table, "RegSetValueEx"))
    assert np.array_equal(vec[fixture_table.dim:],
                          embed_call_arguments(call, 32, seed=9))


def test_embed_sequence_pad_and_length(fixture_table):
    trace = make_trace([ApiCallEvent("RegOpenKeyEx")])
    seq = embed_sequence(trace, fixture_table, n_bins=8, max_len=4)
    assert seq.true_length == 1
    assert seq.matrix.shape == (4, fixture_table.dim + 8)
    assert np.all(seq.matrix[1:] == 0)


def test_embed_sequence_truncates(fixture_table):
    calls = [ApiCallEvent("RegOpenKeyEx") for _ in range(9)]
    seq = embed_sequence(make_trace(calls), fixture_table, n_bins=8, max_len=4)
    assert seq.true_length == 4
    assert seq.matrix.shape[0] == 4


def test_embed_sequence_rows_match_per_call(fixture_table):
    calls = [
        ApiCallEvent("RegOpenKeyEx", (("str", "HKEY_X\\a"),)),
        ApiCallEvent("RegCloseKey", (("int", 0),)),
        ApiCallEvent("Unknown", (("str", "C:\\a\\b"),)),
    ]
    seq = embed_sequence(make_trace(calls), fixture_table, n_bins=16, max_len=8)
    for row, call in enumerate(calls):
        assert np.array_equal(seq.matrix[row],
                              embed_call(call, fixture_table, n_bins=16))


def test_embed_sequence_dedup_flag(fixture_table):
    call = ApiCallEvent("RegOpenKeyEx", (("int", 1),))
    other = ApiCallEvent("RegCloseKey")
    trace = make_trace([call, call, other, other, call])
    plain = embed_sequence(trace, fixture_table, n_bins=8, max_len=8)
    deduped = embed_sequence(trace, fixture_table, n_bins=8, max_len=8,
                             dedup_consecutive=True)
    assert plain.true_length == 5
    assert deduped.true_length == 3


def test_embed_sequence_rejects_bad_len(fixture_table):
    with pytest.raises(ValueError):
        embed_sequence(make_trace([ApiCallEvent("X")]), fixture_table, 8, 0)


def test_trace_file_round_trip(tmp_path):
    traces = [
        make_trace([ApiCallEvent("Foo", (("str", "C:\\x"), ("int", 3)))],
                   trace_id="a", y=1, family=2, timestamp="2021-05"),
        make_trace([ApiCallEvent("Bar")], trace_id="b", y=0, family=0,
                   timestamp="2021-06"),
    ]
    path = tmp_path / "traces.jsonl"
    save_traces(traces, path)
    assert load_traces(path) == traces


def test_embed_dataset_and_subset(fixture_table):
    traces = [
        make_trace([ApiCallEvent("RegOpenKeyEx")], trace_id=f"t{i}",
                   y=i % 2, family=(i % 2) * 3, timestamp="2020-02")
        for i in range(6)
    ]
    ds = embed_dataset(traces, fixture_table, n_bins=8, max_len=4)
    assert len(ds) == 6
    assert ds.X.shape == (6, 4, fixture_table.dim + 8)
    sub = ds.subset(["t3", "t1"])
    assert sub.ids == ["t3", "t1"]
    assert np.array_equal(sub.X[0], ds.X[3])
    assert sub.y.tolist() == [1, 1]


def test_dataset_save_load(tmp_path, fixture_table):
    traces = [make_trace([ApiCallEvent("RegOpenKeyEx")], trace_id=f"t{i}")
              for i in range(3)]
    ds = embed_dataset(traces, fixture_table, n_bins=8, max_len=4)
    path = tmp_path / "tensor.npz"
    save_dataset(ds, path)
    loaded = load_dataset(path)
    assert loaded.ids == ds.ids
    assert np.array_equal(loaded.X, ds.X)
    assert np.array_equal(loaded.lengths, ds.lengths)
    assert np.array_equal(loaded.family, ds.family)
