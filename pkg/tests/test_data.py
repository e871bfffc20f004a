import json

import numpy as np
import pytest

from txalign.data import (
    HOLDOUT,
    TRAIN,
    UNLABELED,
    DataError,
    Dataset,
    EventRecord,
    EventSequence,
    SchemaError,
    SyntheticConfig,
    apply_manifest,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_holdout,
    write_manifest,
)
from txalign.evaluation import roc_auc, train_linear_classifier
from txalign.summarizer import agg_features

HEADER = "client_id,timestamp,amount,mcc,tx_type,label\n"


def write(tmp_path, text, name="events.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_groups_rows_by_client(tmp_path):
    path = write(tmp_path, HEADER + "b,10,-5.5,1,0,1\na,20,3,2,1,0\na,5,-1,0,0,0\n")
    ds = load_dataset(path)
    assert [s.client_id for s in ds.sequences] == ["a", "b"]
    assert [len(s) for s in ds.sequences] == [2, 1]
    assert ds["b"].label == 1


def test_load_resorts_events(tmp_path):
    ds = load_dataset(write(tmp_path, HEADER + "a,30,1,0,0,\na,10,2,0,0,\na,20,3,0,0,\n"))
    assert ds["a"].timestamps.tolist() == [10, 20, 30]
    assert ds["a"].amounts.tolist() == [2.0, 3.0, 1.0]
    assert ds["a"].label is None
    assert ds.splits["a"] == UNLABELED


def test_missing_column_names_it(tmp_path):
    path = write(tmp_path, "client_id,timestamp,mcc,tx_type\na,1,0,0\n")
    with pytest.raises(SchemaError, match="amount"):
        load_dataset(path)


def test_bad_row_reports_line(tmp_path):
    path = write(tmp_path, HEADER + "a,1,2,0,0,\na,2,oops,0,0,\n")
    with pytest.raises(DataError, match="line 3"):
        load_dataset(path)


def test_empty_file(tmp_path):
    with pytest.raises(DataError):
        load_dataset(write(tmp_path, ""))
    with pytest.raises(DataError):
        load_dataset(write(tmp_path, HEADER, "header_only.csv"))


def test_schema_maps_columns(tmp_path):
    text = "user,ts,value,merchant,kind\nu1,5,-3,grocery,card\nu1,6,4,atm,cash\n"
    schema = {"client_id": "user", "timestamp": "ts", "amount": "value", "mcc": "merchant", "tx_type": "kind"}
    ds = load_dataset(write(tmp_path, text), schema)
    # string codes are indexed in sorted order
    assert ds["u1"].mcc.tolist() == [1, 0]
    assert ds.vocab_sizes == {"mcc": 2, "tx_type": 2}


def test_conflicting_labels(tmp_path):
    with pytest.raises(DataError, match="conflicting label"):
        load_dataset(write(tmp_path, HEADER + "a,1,2,0,0,1\na,2,2,0,0,0\n"))


def test_round_trip(tmp_path):
    ds = generate_synthetic(30, 3, SyntheticConfig(unlabeled_frac=0.2))
    save_dataset(ds, tmp_path / "a.csv")
    back = load_dataset(tmp_path / "a.csv")
    assert len(back) == len(ds)
    for s, t in zip(ds.sequences, back.sequences):
        assert s.same_content(t)


def test_manifest_restores_splits(tmp_path):
    ds = split_holdout(generate_synthetic(40, 0), 0.1, 1)
    save_dataset(ds, tmp_path / "e.csv")
    write_manifest(ds, tmp_path / "m.json")
    back = apply_manifest(load_dataset(tmp_path / "e.csv"), tmp_path / "m.json")
    assert back.splits == ds.splits
    assert back.vocab_sizes == ds.vocab_sizes
    assert json.loads((tmp_path / "m.json").read_text())["n_holdout"] == 4


def test_sequence_invariants():
    with pytest.raises(DataError):
        EventSequence("x", np.array([5, 1]), np.zeros(2), np.zeros(2, int), np.zeros(2, int))
    with pytest.raises(DataError):
        EventSequence("x", np.array([1]), np.array([np.nan]), np.zeros(1, int), np.zeros(1, int))
    with pytest.raises(DataError):
        EventSequence("x", np.array([-1]), np.zeros(1), np.zeros(1, int), np.zeros(1, int))


def test_dataset_invariants():
    s = EventSequence.from_records("a", [EventRecord(0, 1.0, 5, 0)])
    with pytest.raises(DataError, match="vocabulary"):
        Dataset((s,), {"mcc": 5, "tx_type": 1})
    with pytest.raises(DataError, match="unique"):
        Dataset((s, s), {"mcc": 6, "tx_type": 1})


def _labeled(n_lab, n_unl=0):
    seqs = [EventSequence.from_records(f"l{i:03d}", [EventRecord(i, 1.0, 0, 0)], i % 2) for i in range(n_lab)]
    seqs += [EventSequence.from_records(f"u{i:03d}", [EventRecord(i, 1.0, 0, 0)]) for i in range(n_unl)]
    return Dataset(tuple(seqs), {"mcc": 1, "tx_type": 1})


def test_holdout_counts():
    ds = split_holdout(_labeled(100), 0.1, 7)
    assert list(ds.splits.values()).count(HOLDOUT) == 10
    again = split_holdout(_labeled(100), 0.1, 7)
    assert again.splits == ds.splits
    mixed = split_holdout(_labeled(50, 30), 0.1, 7)
    held = [c for c, t in mixed.splits.items() if t == HOLDOUT]
    assert len(held) == 5 and all(c.startswith("l") for c in held)
    assert list(mixed.splits.values()).count(TRAIN) == 45


def test_holdout_needs_enough_labels():
    with pytest.raises(DataError):
        split_holdout(_labeled(9), 0.1, 0)
    with pytest.raises(ValueError):
        split_holdout(_labeled(20), 1.0, 0)


def test_synthetic_is_deterministic(tmp_path):
    save_dataset(generate_synthetic(1000, 5), tmp_path / "a.csv")
    save_dataset(generate_synthetic(1000, 5), tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_signal_bounds():
    with pytest.raises(ValueError):
        SyntheticConfig(signal=1.5)
    with pytest.raises(ValueError):
        SyntheticConfig(signal=-0.1)


def _agg_auc(signal, n=2000, seed=0):
    ds = generate_synthetic(n, seed, SyntheticConfig(signal=signal))
    X = np.stack([agg_features(s, ds.vocab_sizes).vector for s in ds.sequences])
    y = np.array([s.label for s in ds.sequences])
    half = n // 2
    clf = train_linear_classifier(X[:half], y[:half])
    return roc_auc(clf.predict_proba(X[half:])[:, 1], y[half:])


def test_no_signal_gives_chance_auc():
    assert abs(_agg_auc(0.0) - 0.5) <= 0.05


def test_full_signal_is_separable():
    assert _agg_auc(1.0) == 1.0


def _class_gap(signal):
    ds = generate_synthetic(2000, 0, SyntheticConfig(signal=signal))
    freq = np.zeros((2, ds.vocab_sizes["mcc"]))
    for s in ds.sequences:
        freq[s.label] += np.bincount(s.mcc, minlength=ds.vocab_sizes["mcc"])
    freq /= freq.sum(axis=1, keepdims=True)
    return np.abs(freq[0] - freq[1]).sum()


def test_class_gap_grows_with_signal():
    gaps = [_class_gap(s) for s in (0.0, 0.5, 1.0)]
    assert gaps[0] < gaps[1] < gaps[2]


def test_synthetic_amounts_are_whole():
    ds = generate_synthetic(50, 1)
    for s in ds.sequences:
        assert np.all(s.amounts == np.round(s.amounts)) and np.all(s.amounts != 0)
        assert np.all(np.diff(s.timestamps) >= 0)
