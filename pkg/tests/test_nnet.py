import math

import numpy as np
import pytest

from conftest import random_dataset
from mme.errors import InsufficientClass, ShapeMismatch
from mme.nnet import (ContrastiveBatch, EncoderConfig, ModelState, TrainConfig,
                      bce_loss, build_contrastive_batch, classifier_forward,
                      classify, contrastive_loss, encode, encode_batch,
                      grad_check, init_params, load_model, loss_and_grads,
                      predict, predict_dataset, save_model, total_loss,
                      train_model)
from mme.sequence import ApiCallEvent, ApiTrace, EmbeddedSequence, embed_sequence


def small_model(rng, kind="textcnn", width=10, max_len=8, lam=1.0):
    enc = EncoderConfig(kind=kind, filter_widths=(3, 4, 5),
                        filters_per_width=3, latent_dim=8)
    params = init_params(enc, width, 5, rng)
    return ModelState(mode="mme", encoder_cfg=enc,
                      train_cfg=TrainConfig(seed=0), params=params,
                      input_dim=width, max_len=max_len, lam=lam, margin=1.0)


def brute_force_contrastive(Z, y, yp, m):
    """Independent oracle: literal double loop over the pair definitions."""
    n = len(Z)
    total = 0.0
    for i in range(n):
        pos = [j for j in range(n)
               if j != i and y[j] == y[i] and (y[i] == 0 or yp[j] == yp[i])]
        neg = [j for j in range(n) if y[j] != y[i]]
        term = 0.0
        if pos:
            term += sum(np.linalg.norm(Z[i] - Z[j]) for j in pos) / len(pos)
        if neg:
            term += sum(max(0.0, m - np.linalg.norm(Z[i] - Z[j]))
                        for j in neg) / len(neg)
        total += term
    return total


# --- encoder ------------------------------------------------------------------

def test_encode_unit_norm():
    rng = np.random.default_rng(0)
    model = small_model(rng)
    X = rng.normal(size=(6, 8, 10))
    lengths = np.array([8, 5, 3, 8, 4, 6])
    Z, _ = encode_batch(X, lengths, model.params, model.encoder_cfg)
    assert np.allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-12)


def test_encode_padding_invariance():
    rng = np.random.default_rng(1)
    for kind in ("textcnn", "meanpool"):
        model = small_model(rng, kind=kind)
        X = rng.normal(size=(3, 8, 10))
        lengths = np.array([4, 6, 3])
        for i, ln in enumerate(lengths):
            X[i, ln:] = 0.0
        Z1, _ = encode_batch(X, lengths, model.params, model.encoder_cfg)
        X2 = X.copy()
        for i, ln in enumerate(lengths):
            X2[i, ln:] = rng.normal(size=(8 - ln, 10)) * 100
        Z2, _ = encode_batch(X2, lengths, model.params, model.encoder_cfg)
        assert np.allclose(Z1, Z2, atol=1e-12), kind


def test_encode_zero_input_zero_bias_well_defined():
    rng = np.random.default_rng(2)
    model = small_model(rng, kind="meanpool")
    model.params["proj_W"] = np.zeros_like(model.params["proj_W"])
    model.params["proj_b"] = np.zeros_like(model.params["proj_b"])
    X = np.zeros((1, 8, 10))
    Z, _ = encode_batch(X, np.array([4]), model.params, model.encoder_cfg)
    assert np.linalg.norm(Z[0]) == pytest.approx(1.0)


def test_encode_shape_mismatch():
    rng = np.random.default_rng(3)
    model = small_model(rng)
    X = rng.normal(size=(2, 8, 12))  # wrong width
    with pytest.raises(ShapeMismatch):
        encode_batch(X, np.array([8, 8]), model.params, model.encoder_cfg)


def test_encode_single_sequence_helper():
    rng = np.random.default_rng(4)
    model = small_model(rng)
    mat = rng.normal(size=(8, 10))
    mat[5:] = 0.0
    seq = EmbeddedSequence(matrix=mat, true_length=5)
    z = encode(seq, model.encoder_cfg, model.params)
    Z, _ = encode_batch(mat[None], np.array([5]), model.params, model.encoder_cfg)
    assert np.array_equal(z, Z[0])


# --- classifier and losses ------------------------------------------------------

def test_classify_threshold_at_half():
    rng = np.random.default_rng(5)
    model = small_model(rng)
    # zero weights give logit 0 -> probability exactly 0.5 -> label 1
    model.params["cls_W2"] = np.zeros_like(model.params["cls_W2"])
    model.params["cls_b2"] = np.zeros_like(model.params["cls_b2"])
    f = classify(rng.normal(size=8), model.params)
    assert f == pytest.approx(0.5)
    assert int(f >= 0.5) == 1


def test_classify_clamped_probabilities():
    rng = np.random.default_rng(6)
    model = small_model(rng)
    model.params["cls_b2"] = np.array([1000.0])
    f = classify(rng.normal(size=8), model.params)
    assert f == pytest.approx(1.0 - 1e-7)
    model.params["cls_b2"] = np.array([-1000.0])
    f = classify(rng.normal(size=8), model.params)
    assert f == pytest.approx(1e-7)


def test_classify_monotone_in_logit():
    z = np.zeros(8)
    params = {
        "cls_W1": np.zeros((8, 5)), "cls_b1": np.zeros(5),
        "cls_W2": np.zeros((5, 1)), "cls_b2": np.zeros(1),
    }
    outs = []
    for logit in (-3.0, -1.0, 0.0, 1.0, 3.0):
        params["cls_b2"] = np.array([logit])
        outs.append(classify(z, params))
    assert outs == sorted(outs)


def test_bce_values():
    assert bce_loss(1.0 - 1e-9, 1) == pytest.approx(0.0, abs=1e-6)
    assert bce_loss(0.5, 1) == pytest.approx(math.log(2.0))
    assert bce_loss(0.5, 0) == pytest.approx(math.log(2.0))
    fs = np.array([0.9, 0.2, 0.6])
    ys = np.array([1, 0, 1])
    expected = sum(bce_loss(f, y) for f, y in zip(fs, ys))
    assert bce_loss(fs, ys) == pytest.approx(expected, rel=1e-12)
    assert bce_loss(0.01, 1) >= 0.0


# --- contrastive loss -----------------------------------------------------------

def test_contrastive_two_identical_benign():
    Z = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert contrastive_loss(Z, [0, 0], [0, 0], 1.0) == 0.0


def test_contrastive_separated_pair_inactive_hinge():
    Z = np.array([[1.0, 0.0], [-1.0, 0.0]])  # distance 2 >= m
    assert contrastive_loss(Z, [0, 1], [0, 1], 1.0) == 0.0


def test_contrastive_hand_batch():
    # two benign 0.2 apart, two same-family malicious 0.4 apart,
    # every cross distance 0.9, margin 1 -> total 1.6 by enumeration
    e = math.sqrt(0.76)
    Z = np.array([
        [-0.1, 0.0, 0.0],
        [0.1, 0.0, 0.0],
        [0.0, e, -0.2],
        [0.0, e, 0.2],
    ])
    y = [0, 0, 1, 1]
    yp = [0, 0, 1, 1]
    got = contrastive_loss(Z, y, yp, 1.0)
    assert got == pytest.approx(1.6, abs=1e-9)
    assert got == pytest.approx(brute_force_contrastive(Z, y, yp, 1.0), abs=1e-12)


def test_contrastive_cross_family_malicious_pairs_ignored():
    Z = np.array([[1.0, 0.0], [0.0, 1.0]])
    # two malicious samples from different families: neither Pos nor Neg
    assert contrastive_loss(Z, [1, 1], [1, 2], 1.0) == 0.0


def test_contrastive_matches_oracle_random_batches():
    rng = np.random.default_rng(11)
    for _ in range(50):
        n = int(rng.integers(2, 17))
        Z = rng.normal(size=(n, 6))
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        y = rng.integers(0, 2, size=n)
        yp = np.where(y == 1, rng.integers(1, 4, size=n), 0)
        m = float(rng.uniform(0.2, 1.5))
        got = contrastive_loss(Z, y, yp, m)
        want = brute_force_contrastive(Z, y, yp, m)
        assert got == pytest.approx(want, abs=1e-12)
        assert got >= 0.0


def test_margin_saturation():
    # all positive distances zero, all cross distances >= margin
    Z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    assert contrastive_loss(Z, [0, 0, 1, 1], [0, 0, 2, 2], 1.0) == 0.0


# --- batches --------------------------------------------------------------------

def test_batch_mirror_invariant_many_draws():
    rng = np.random.default_rng(12)
    ds = random_dataset(rng, n=30, n_families=3)
    for _ in range(200):
        batch = build_contrastive_batch(ds, 8, rng)
        assert batch.check_mirrored()


def test_batch_single_family_dataset():
    rng = np.random.default_rng(13)
    ds = random_dataset(rng, n=20, n_families=1)
    batch = build_contrastive_batch(ds, 6, rng)
    malicious = batch.family[batch.y == 1]
    assert set(malicious.tolist()) <= {1}
    assert batch.check_mirrored()


def test_batch_halves_share_class_histogram():
    rng = np.random.default_rng(14)
    ds = random_dataset(rng, n=40, n_families=4)
    for _ in range(100):
        batch = build_contrastive_batch(ds, 10, rng)
        first = sorted(zip(batch.y[:10].tolist(), batch.family[:10].tolist()))
        second = sorted(zip(batch.y[10:].tolist(), batch.family[10:].tolist()))
        assert first == second


def test_batch_insufficient_class():
    rng = np.random.default_rng(15)
    ds = random_dataset(rng, n=7, n_families=3)
    # family 3 has a single member; force it to be drawn by using all samples
    with pytest.raises(InsufficientClass):
        for _ in range(50):
            build_contrastive_batch(ds, 7, rng, allow_replacement=False)


def test_batch_replacement_fallback_flagged():
    rng = np.random.default_rng(16)
    ds = random_dataset(rng, n=7, n_families=3)
    flagged = False
    for _ in range(50):
        batch = build_contrastive_batch(ds, 7, rng, allow_replacement=True)
        assert batch.check_mirrored()
        flagged = flagged or batch.used_replacement
    assert flagged


# --- combined loss and gradient check -------------------------------------------

def test_total_loss_lambda_zero_equals_contrastive():
    rng = np.random.default_rng(17)
    ds = random_dataset(rng)
    model = small_model(rng, lam=0.0)
    batch = build_contrastive_batch(ds, 6, rng)
    Z, _ = encode_batch(batch.X, batch.lengths, model.params, model.encoder_cfg)
    expected = contrastive_loss(Z, batch.y, batch.family, model.margin)
    assert total_loss(batch, model) == pytest.approx(expected, rel=1e-12)


def test_total_loss_equals_sum_of_parts():
    rng = np.random.default_rng(18)
    ds = random_dataset(rng)
    model = small_model(rng, lam=0.7)
    batch = build_contrastive_batch(ds, 6, rng)
    Z, _ = encode_batch(batch.X, batch.lengths, model.params, model.encoder_cfg)
    f, _ = classifier_forward(Z, model.params)
    expected = (contrastive_loss(Z, batch.y, batch.family, model.margin)
                + 0.7 * bce_loss(f, batch.y))
    assert total_loss(batch, model) == pytest.approx(expected, rel=1e-12)


def test_loss_parts_nonnegative():
    rng = np.random.default_rng(19)
    ds = random_dataset(rng)
    model = small_model(rng)
    for _ in range(10):
        batch = build_contrastive_batch(ds, 5, rng)
        _, _, (l_con, l_cla) = loss_and_grads(
            model.params, batch.X, batch.lengths, batch.y, batch.family,
            model.encoder_cfg, lam=model.lam, margin=model.margin)
        assert l_con >= 0.0 and l_cla >= 0.0


def test_grad_check_meanpool_tight():
    rng = np.random.default_rng(20)
    ds = random_dataset(rng)
    model = small_model(rng, kind="meanpool")
    batch = build_contrastive_batch(ds, 4, rng)
    assert grad_check(model, batch, eps=1e-4) < 1e-6


def test_grad_check_textcnn():
    rng = np.random.default_rng(21)
    ds = random_dataset(rng)
    model = small_model(rng, kind="textcnn")
    batch = build_contrastive_batch(ds, 2, rng)
    assert grad_check(model, batch, eps=1e-5) < 1e-4


def test_grad_check_eps_range():
    rng = np.random.default_rng(22)
    ds = random_dataset(rng)
    model = small_model(rng)
    batch = build_contrastive_batch(ds, 2, rng)
    with pytest.raises(ValueError):
        grad_check(model, batch, eps=1e-2)


# --- training --------------------------------------------------------------------

def train_tiny(mode, seed=0, rng_seed=23, epochs=8):
    rng = np.random.default_rng(rng_seed)
    ds = random_dataset(rng, n=30, n_families=2)
    enc = EncoderConfig(kind="textcnn", filter_widths=(2, 3),
                        filters_per_width=3, latent_dim=8)
    cfg = TrainConfig(mode=mode, epochs=epochs, pairs_per_batch=6,
                      learning_rate=0.02, classifier_hidden=5, seed=seed)
    return ds, train_model(ds, enc, cfg)


def test_train_records_history():
    _, model = train_tiny("mme")
    assert len(model.loss_history) == 8
    assert model.loss_history[-1] <= model.loss_history[0]


def test_train_deterministic():
    _, m1 = train_tiny("mme")
    _, m2 = train_tiny("mme")
    for key in m1.params:
        assert np.array_equal(m1.params[key], m2.params[key])
    assert m1.loss_history == m2.loss_history


def test_train_regular_mode_is_bce_only():
    ds, model = train_tiny("regular")
    assert model.mode == "regular"
    # the recorded epoch losses are plain BCE sums: recompute epoch 1's value
    rng = np.random.default_rng(model.train_cfg.seed)
    params = init_params(model.encoder_cfg, ds.X.shape[2],
                         model.train_cfg.classifier_hidden, rng)
    order = rng.permutation(len(ds))
    total = 0.0
    from mme.nnet import _sgd_step  # first epoch replay
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    for start in range(0, len(ds), 12):
        sel = order[start:start + 12]
        loss, grads, _ = loss_and_grads(
            params, ds.X[sel], ds.lengths[sel], ds.y[sel], ds.family[sel],
            model.encoder_cfg, lam=1.0, margin=model.margin,
            include_contrastive=False)
        _sgd_step(params, velocity, grads, model.train_cfg)
        total += loss
    assert total == pytest.approx(model.loss_history[0], rel=1e-12)


def test_train_filter_width_validation():
    rng = np.random.default_rng(24)
    ds = random_dataset(rng, max_len=4)
    enc = EncoderConfig(kind="textcnn", filter_widths=(3, 4, 5),
                        filters_per_width=2, latent_dim=4)
    with pytest.raises(ShapeMismatch):
        train_model(ds, enc, TrainConfig(epochs=1, pairs_per_batch=4))


def test_auto_balance_moves_lambda():
    rng = np.random.default_rng(25)
    ds = random_dataset(rng, n=30)
    enc = EncoderConfig(kind="meanpool", latent_dim=8)
    cfg = TrainConfig(mode="mme", epochs=5, pairs_per_batch=6,
                      auto_balance=True, seed=1)
    model = train_model(ds, enc, cfg)
    assert model.lam != cfg.lam


# --- prediction and persistence ---------------------------------------------------

def test_predict_composes_public_ops(fixture_table):
    rng = np.random.default_rng(26)
    trace = ApiTrace(
        trace_id="p0",
        calls=(ApiCallEvent("RegOpenKeyEx", (("str", "HKEY_L\\a\\b"),)),
               ApiCallEvent("RegCloseKey", (("int", 0),))),
        y=1, family=1, timestamp="2020-03",
    )
    model = small_model(rng, width=fixture_table.dim + 16, max_len=6)
    y_hat, f_x, z = predict(model, trace, fixture_table, 16, 6)
    seq = embed_sequence(trace, fixture_table, 16, 6)
    z2 = encode(seq, model.encoder_cfg, model.params)
    f2 = classify(z2, model.params)
    assert np.array_equal(z, z2)
    assert f_x == f2
    assert y_hat == int(f2 >= 0.5)
    # deterministic
    assert predict(model, trace, fixture_table, 16, 6)[1] == f_x


def test_predict_dataset_agrees_with_predict(fixture_table):
    rng = np.random.default_rng(27)
    model = small_model(rng, width=fixture_table.dim + 8, max_len=6)
    from mme.sequence import embed_dataset
    traces = [
        ApiTrace(trace_id=f"q{i}",
                 calls=(ApiCallEvent("RegOpenKeyEx"), ApiCallEvent("GetFileSize")),
                 y=i % 2, family=(i % 2), timestamp="2020-04")
        for i in range(5)
    ]
    ds = embed_dataset(traces, fixture_table, 8, 6)
    y_hat, scores, latents = predict_dataset(model, ds, chunk=2)
    for i, trace in enumerate(traces):
        yh, fx, z = predict(model, trace, fixture_table, 8, 6)
        assert yh == y_hat[i]
        assert fx == pytest.approx(scores[i], rel=1e-12)
        assert np.allclose(z, latents[i], atol=1e-12)


def test_model_save_load_round_trip(tmp_path):
    _, model = train_tiny("mme", epochs=2)
    path = tmp_path / "model.txt"
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.mode == model.mode
    assert loaded.encoder_cfg == model.encoder_cfg
    assert loaded.train_cfg == model.train_cfg
    assert loaded.lam == model.lam
    assert loaded.loss_history == model.loss_history
    for key in model.params:
        assert np.array_equal(loaded.params[key], model.params[key])
