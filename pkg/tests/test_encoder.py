import math

import numpy as np
import pytest

from txalign.data import EventRecord, EventSequence, generate_synthetic
from txalign.encoder import (
    EncoderConfig,
    EncoderError,
    GRUEncoder,
    PretrainConfig,
    TrainingError,
    coles_loss,
    coles_sample,
    encode,
    load_encoder,
    pretrain_coles,
    save_encoder,
    smooth,
)
from txalign.gradcheck import check_param_grads, numeric_grad, relative_error

from conftest import DAY, make_seq

VOCAB = {"mcc": 6, "tx_type": 3}


def small(hidden=4, d_out=3, pooling="last", seed=0, d_emb=2):
    return GRUEncoder.create(EncoderConfig(VOCAB, d_emb=d_emb, hidden=hidden, d_out=d_out, pooling=pooling), seed)


def test_featurize_edge_cases():
    enc = small()
    zero = enc.featurize(EventRecord(10, 0.0, 1, 0))
    assert zero[-3:].tolist() == [0.0, 0.0, 0.0]
    neg = enc.featurize(EventRecord(10, -100.0, 1, 0), prev_timestamp=10 - DAY)
    pos = enc.featurize(EventRecord(10, 100.0, 1, 0), prev_timestamp=10 - DAY)
    assert neg[-3] == -1 and pos[-3] == 1 and neg[-2] == pos[-2] == pytest.approx(math.log1p(100))
    assert pos[-1] == pytest.approx(math.log(2))
    with pytest.raises(EncoderError):
        enc.featurize(EventRecord(10, 1.0, 6, 0))


def test_featurize_matches_forward_inputs():
    enc = small()
    s = make_seq(n=5)
    _, cache = enc.forward([s])
    prev = None
    for t, ev in enumerate(s.iter_events()):
        assert np.allclose(cache["X"][t, 0], enc.featurize(ev, prev))
        prev = ev.timestamp


def test_zero_weights_give_output_bias():
    enc = small()
    for k in enc.params:
        enc.params[k][...] = 0.0
    enc.params["out_b"][:] = [0.5, -1.0, 2.0]
    out, cache = enc.forward([make_seq(n=7)])
    assert np.all(cache["Hprev"] == 0)
    assert out[0].tolist() == [0.5, -1.0, 2.0]


def _sig(x):
    return 1 / (1 + math.exp(-x))


def test_hand_computed_cell():
    cfg = EncoderConfig({"mcc": 2, "tx_type": 1}, d_emb=1, hidden=2, d_out=2)
    enc = GRUEncoder.create(cfg, 0)
    p = enc.params
    p["emb_mcc"][:] = [[0.3], [-0.2]]
    p["emb_tx_type"][:] = [[0.1]]
    p["num_w"][:] = np.eye(3)
    p["num_b"][:] = 0.0
    rng = np.random.default_rng(1)
    for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"):
        p[k][...] = np.round(rng.uniform(-0.5, 0.5, size=p[k].shape), 2)
    p["out_w"][:] = [[1.0, 0.5], [-0.25, 2.0]]
    p["out_b"][:] = [0.1, -0.1]
    seq = EventSequence.from_records("a", [EventRecord(0, -20.0, 1, 0)])

    x = [-0.2, 0.1, -1.0, math.log1p(20.0), 0.0]
    W = {k: p[k].tolist() for k in p}

    def affine(Wk, bk, v):
        return [sum(v[i] * Wk[i][j] for i in range(len(v))) + bk[j] for j in range(2)]

    # h0 = 0, so the recurrent terms vanish
    z = [_sig(a) for a in affine(W["W_z"], W["b_z"], x)]
    n = [math.tanh(a) for a in affine(W["W_h"], W["b_h"], x)]
    h = [z[j] * n[j] for j in range(2)]
    expected = affine(W["out_w"], W["out_b"], h)
    assert np.allclose(encode(seq, enc), expected, atol=1e-6)


def test_duplicate_last_event_changes_output():
    enc = small(hidden=8, seed=3)
    s = make_seq(n=6, seed=2)
    dup = EventSequence.from_records("c0", s.events + [s.events[-1]])
    assert not np.allclose(encode(s, enc), encode(dup, enc))


@pytest.mark.parametrize("pooling", ["last", "mean"])
def test_batch_independence(pooling, seqs):
    enc = small(hidden=6, pooling=pooling, seed=4)
    batch, _ = enc.forward(seqs)
    for i, s in enumerate(seqs):
        assert np.allclose(batch[i], encode(s, enc), atol=1e-12)
    assert np.allclose(enc.embed(seqs, batch_size=4), batch, atol=1e-12)


def test_empty_sequence_rejected():
    enc = small()
    empty = EventSequence("e", np.array([], int), np.array([]), np.array([], int), np.array([], int))
    with pytest.raises(EncoderError):
        encode(empty, enc)


def test_parameter_count():
    cfg = EncoderConfig({"mcc": 40, "tx_type": 4})
    d_in, H, d = 16 * 2 + 3, 1024, 256
    manual = (40 + 4) * 16 + 3 * 3 + 3 + 3 * (d_in * H + H * H + H) + H * d + d
    assert cfg.n_params() == manual == GRUEncoder.create(cfg).n_params
    assert 3_000_000 <= manual <= 6_000_000


def test_coles_sample_ranges():
    s = make_seq(n=10)
    slices = coles_sample(s, 6, (3, 5), 0)
    for part in slices:
        assert 3 <= len(part) <= 5
        start = int(np.flatnonzero(s.timestamps == part.timestamps[0])[0])
        assert np.array_equal(part.timestamps, s.timestamps[start : start + len(part)])
    again = coles_sample(s, 6, (3, 5), 0)
    assert all(a.same_content(b) for a, b in zip(slices, again))


def test_coles_sample_clipping_and_skip():
    s = make_seq(n=3)
    assert all(p.same_content(s) for p in coles_sample(s, 2, (3, 3), 1))
    assert coles_sample(make_seq(n=2), 2, (3, 5), 0) is None
    with pytest.raises(ValueError):
        coles_sample(s, 1, (1, 2), 0)


def test_coles_loss_identical_embeddings():
    loss, _ = coles_loss(np.ones((4, 3)), ["a", "a", "b", "b"], tau=1.0)
    assert loss == pytest.approx(-math.log(1 / 3), abs=1e-12)


def test_coles_loss_separated():
    E = np.array([[1.0, 0], [1.0, 0], [-1.0, 0], [-1.0, 0]])
    loss, _ = coles_loss(E, ["a", "a", "b", "b"], tau=0.1)
    assert loss < 0.01


def test_coles_loss_errors():
    with pytest.raises(ValueError):
        coles_loss(np.eye(3), ["a", "a", "a"])
    with pytest.raises(ValueError):
        coles_loss(np.eye(3), ["a", "a", "b"])


@pytest.mark.parametrize("seed", range(5))
def test_coles_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    E = rng.normal(size=(6, 4))
    ids = ["a", "a", "b", "b", "c", "c"]
    _, dE = coles_loss(E, ids, 0.1)
    _, num = numeric_grad(lambda: coles_loss(E, ids, 0.1)[0], E)
    assert relative_error(dE, num) < 1e-4


def encoder_gradient_errors(seed, pooling):
    enc = small(hidden=4, d_out=3, pooling=pooling, seed=seed)
    rng = np.random.default_rng(seed)
    a, b = make_seq("a", n=9, seed=seed), make_seq("b", n=7, seed=seed + 10)
    slices = coles_sample(a, 2, (3, 6), rng) + coles_sample(b, 2, (3, 6), rng)
    ids = ["a", "a", "b", "b"]

    def f():
        out, _ = enc.forward(slices)
        return coles_loss(out, ids, 0.1)[0]

    out, cache = enc.forward(slices)
    grads = enc.backward(cache, coles_loss(out, ids, 0.1)[1])
    assert set(grads) == set(enc.params)
    assert all(grads[k].shape == enc.params[k].shape for k in grads)
    return check_param_grads(f, enc.params, grads, eps=1e-5, max_entries=40, seed=seed)


@pytest.mark.parametrize("pooling", ["last", "mean"])
@pytest.mark.parametrize("seed", range(5))
def test_encoder_gradient(seed, pooling):
    errors = encoder_gradient_errors(seed, pooling)
    assert max(errors.values()) < 1e-4, errors


def test_pretrain_smoothed_loss_is_monotone():
    ds = generate_synthetic(200, 0)
    cfg = EncoderConfig(ds.vocab_sizes, hidden=16, d_out=16)
    _, losses = pretrain_coles(ds, cfg, PretrainConfig(epochs=5))
    curve = smooth(losses, 10)
    assert len(curve) > 1
    assert np.all(np.diff(curve) <= 0)


def test_pretrain_zero_lr_and_determinism():
    ds = generate_synthetic(40, 1)
    cfg = EncoderConfig(ds.vocab_sizes, hidden=8, d_out=4)
    start = GRUEncoder.create(cfg, 0)
    frozen, _ = pretrain_coles(ds, cfg, PretrainConfig(epochs=1, lr=0.0, batch_size=16), encoder=start)
    assert all(np.array_equal(frozen.params[k], start.params[k]) for k in start.params)
    a, la = pretrain_coles(ds, cfg, PretrainConfig(epochs=2, batch_size=16))
    b, lb = pretrain_coles(ds, cfg, PretrainConfig(epochs=2, batch_size=16))
    assert la == lb and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_pretrain_divergence_names_step():
    ds = generate_synthetic(40, 1)
    cfg = EncoderConfig(ds.vocab_sizes, hidden=8, d_out=4)
    enc = GRUEncoder.create(cfg, 0)
    enc.params["out_w"][0, 0] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        pretrain_coles(ds, cfg, PretrainConfig(epochs=1, batch_size=16), encoder=enc)


def test_checkpoint_round_trip(tmp_path):
    enc = small(pooling="mean", seed=9)
    save_encoder(tmp_path / "e.ckpt", enc)
    raw = (tmp_path / "e.ckpt").read_bytes()
    assert raw[:4] == b"LTCK"
    back = load_encoder(tmp_path / "e.ckpt")
    assert back.config == enc.config
    assert all(np.array_equal(back.params[k], enc.params[k]) for k in enc.params)
