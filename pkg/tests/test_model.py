import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import bce
from relsplit.corpus import SynthSpec, gen_synthetic
from relsplit.encode import FeatureVector, FeaturizerConfig, encode_dataset, featurize
from relsplit.errors import CheckpointFormatError, ConfigMismatch, DimMismatch, EmptyBatch, NonFiniteLoss
from relsplit.model import (
    Checkpoint,
    ModelParams,
    TrainConfig,
    batch_grad,
    batch_loss,
    classify,
    loss_trend_ok,
    predict_proba,
    tapt_train,
    train,
    tune_threshold,
)

DIMS = 64


def dense_vec(values):
    values = np.asarray(values, dtype=np.float64)
    idx = np.flatnonzero(values)
    return FeatureVector(values.shape[0], idx.astype(np.int64), values[idx])


def random_batch(rng, n, dims=DIMS):
    out = []
    for _ in range(n):
        v = rng.normal(size=dims) * (rng.random(dims) < 0.5)
        norm = np.linalg.norm(v)
        out.append((dense_vec(v / norm if norm else v), int(rng.integers(0, 2))))
    return out


@pytest.fixture(scope="module")
def separable():
    """200 labeled records over a small vocabulary, so every token recurs often enough to be learned."""
    _, target = gen_synthetic(SynthSpec(records_per_task=200, vocab_size=64), 7)
    return encode_dataset(target)


# ---------------------------------------------------------------------------
# prediction and loss

def test_predict_proba_examples():
    x = dense_vec(np.ones(DIMS) / 8)
    assert predict_proba(ModelParams.zeros(DIMS), x) == 0.5
    big = ModelParams(np.zeros(DIMS), 50.0)
    assert 1 - 1e-9 < predict_proba(big, x) < 1
    for b in (1e4, -1e4):
        p = predict_proba(ModelParams(np.zeros(DIMS), b), x)
        assert 0 < p < 1 and math.isfinite(p)
    with pytest.raises(DimMismatch):
        predict_proba(ModelParams.zeros(DIMS * 2), x)


def test_loss_anchors():
    x = dense_vec(np.ones(DIMS) / 8)
    assert abs(batch_loss(ModelParams.zeros(DIMS), [(x, 1), (x, 0)]) - math.log(2)) <= 1e-12
    assert abs(batch_loss(ModelParams.zeros(DIMS), [(x, 1), (x, 1), (x, 0)]) - math.log(2)) <= 1e-12
    # single example, y = 1, p = 0.25: w.x + b = logit(0.25)
    params = ModelParams(np.zeros(DIMS), math.log(0.25 / 0.75))
    assert abs(batch_loss(params, [(x, 1)]) - 1.386294) <= 1e-6
    assert batch_loss(params, [(x, 1)]) == pytest.approx(bce(0.25, 1), abs=1e-12)


def test_loss_clamp_floor():
    x = dense_vec(np.ones(DIMS) / 8)
    loss = batch_loss(ModelParams(np.zeros(DIMS), 100.0), [(x, 1)])
    assert 0 <= loss <= 2.8e-11
    worst = batch_loss(ModelParams(np.zeros(DIMS), 100.0), [(x, 0)])
    assert worst == pytest.approx(-math.log(1e-12), rel=1e-9)


def test_loss_l2_term():
    rng = np.random.default_rng(0)
    w = rng.normal(size=DIMS)
    batch = random_batch(rng, 5)
    base = batch_loss(ModelParams(w, 0.1), batch)
    assert batch_loss(ModelParams(w, 0.1), batch, l2=0.3) == pytest.approx(base + 0.15 * float(w @ w))


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        batch_loss(ModelParams.zeros(DIMS), [])
    with pytest.raises(EmptyBatch):
        batch_grad(ModelParams.zeros(DIMS), [])


def test_grad_symmetry_and_regularizer_only():
    x = dense_vec(np.ones(DIMS) / 8)
    _, gb = batch_grad(ModelParams.zeros(DIMS), [(x, 1), (x, 0)])
    assert gb == 0.0
    # every p_j equals y_j up to rounding: only the regularizer remains
    w = np.zeros(DIMS)
    w[0] = 0.5
    e0 = np.zeros(DIMS)
    e0[0] = 1.0
    params = ModelParams(w, 0.0)
    gw, _ = batch_grad(ModelParams(w, 40.0), [(dense_vec(e0), 1)], l2=0.1)
    assert np.allclose(gw, 0.1 * w, atol=1e-15)
    gw0, _ = batch_grad(params, [(x, 1)], l2=0.0)
    assert not np.allclose(gw0, 0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    h = 1e-5
    for _ in range(100):
        params = ModelParams(rng.normal(scale=0.5, size=DIMS), float(rng.normal()))
        batch = random_batch(rng, int(rng.integers(1, 9)))
        l2 = float(rng.choice([0.0, 1e-3, 0.1]))
        gw, gb = batch_grad(params, batch, l2)
        for j in rng.choice(DIMS, size=20, replace=False):
            wp, wm = params.w.copy(), params.w.copy()
            wp[j] += h
            wm[j] -= h
            fd = (batch_loss(ModelParams(wp, params.b), batch, l2) - batch_loss(ModelParams(wm, params.b), batch, l2)) / (2 * h)
            assert abs(fd - gw[j]) / max(abs(fd), abs(gw[j]), 1e-8) < 1e-4 or abs(fd - gw[j]) < 1e-10
        fd_b = (batch_loss(ModelParams(params.w, params.b + h), batch, l2)
                - batch_loss(ModelParams(params.w, params.b - h), batch, l2)) / (2 * h)
        assert abs(fd_b - gb) / max(abs(fd_b), abs(gb), 1e-8) < 1e-4 or abs(fd_b - gb) < 1e-10


@given(st.integers(0, 2**32 - 1))
def test_loss_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    params = ModelParams(rng.normal(scale=10, size=DIMS), float(rng.normal(scale=10)))
    assert batch_loss(params, random_batch(rng, 4)) >= 0


# ---------------------------------------------------------------------------
# training

def test_train_config_defaults_and_validation():
    assert TrainConfig().learning_rate == 1e-3
    assert TrainConfig(optimizer="sgd").learning_rate == 0.1
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.l2) == (20, 32, 1e-4)
    for bad in (dict(optimizer="adam"), dict(learning_rate=0.0), dict(learning_rate=float("nan")), dict(epochs=-1),
                dict(batch_size=0), dict(l2=-1.0), dict(beta1=1.0), dict(eps=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def _f1(ckpt, enc):
    rows = classify(ckpt, enc)
    tp = sum(1 for (_, p, _), y in zip(rows, enc.labels) if p == 1 and y == 1)
    fp = sum(1 for (_, p, _), y in zip(rows, enc.labels) if p == 1 and y == 0)
    fn = sum(1 for (_, p, _), y in zip(rows, enc.labels) if p == 0 and y == 1)
    return 2 * tp / (2 * tp + fp + fn)


def test_defaults_fit_separable_set(separable):
    ckpt = train(separable)
    assert _f1(ckpt, separable) >= 0.99
    hist = ckpt.provenance[-1].loss_history
    assert len(hist) == 20 and loss_trend_ok(hist)


def test_sgd_default_loss_trend(separable):
    ckpt = train(separable, TrainConfig(optimizer="sgd"))
    assert loss_trend_ok(ckpt.provenance[-1].loss_history)


def test_zero_epochs_is_identity(separable):
    assert train(separable, TrainConfig(epochs=0)).params == ModelParams.zeros(separable.dims)
    init = train(separable, TrainConfig(epochs=2))
    again = train(separable, TrainConfig(epochs=0), init=init)
    assert again.params == init.params
    assert len(again.provenance) == 2


def test_training_is_deterministic(separable):
    cfg = TrainConfig(epochs=3, seed=5)
    assert train(separable, cfg).to_bytes() == train(separable, cfg).to_bytes()
    assert train(separable, cfg).to_bytes() != train(separable, TrainConfig(epochs=3, seed=6)).to_bytes()


def test_unlabeled_rows_are_ignored(separable):
    import dataclasses

    labels = separable.labels.copy()
    labels[:10] = -1
    partial = dataclasses.replace(separable, labels=labels)
    ckpt = train(partial, TrainConfig(epochs=1))
    assert ckpt.provenance[-1].n_examples == len(separable) - 10


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_loss_aborts(separable):
    with pytest.raises(NonFiniteLoss):
        train(separable, TrainConfig(optimizer="sgd", learning_rate=1e308, epochs=3))


def test_init_featurizer_must_match(separable):
    other = encode_dataset(gen_synthetic(SynthSpec(records_per_task=20), 1)[1], cfg=FeaturizerConfig(dims=4096, seed=9))
    with pytest.raises(ConfigMismatch):
        train(other, TrainConfig(epochs=1), init=train(separable, TrainConfig(epochs=1)))


def test_tapt_provenance_and_identity(separable):
    aux, _ = gen_synthetic(SynthSpec(records_per_task=200), 7)
    enc_aux = encode_dataset(aux, cfg=separable.featurizer)
    ck = tapt_train(enc_aux, separable, TrainConfig(epochs=2), TrainConfig(epochs=2))
    assert [s.dataset_fingerprint for s in ck.provenance] == [enc_aux.fingerprint(), separable.fingerprint()]
    degenerate = tapt_train(enc_aux, separable, TrainConfig(epochs=0), TrainConfig(epochs=2))
    direct = train(separable, TrainConfig(epochs=2))
    assert degenerate.params == direct.params
    other = encode_dataset(aux, cfg=FeaturizerConfig(dims=2048))
    with pytest.raises(ConfigMismatch):
        tapt_train(other, separable)


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip(tmp_path, separable):
    ck = tapt_train(separable, separable, TrainConfig(epochs=1), TrainConfig(epochs=1, optimizer="sgd"))
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.params == ck.params and back.featurizer == ck.featurizer
    assert [s.config for s in back.provenance] == [s.config for s in ck.provenance]


def test_checkpoint_rejects_corruption(tmp_path, separable):
    data = bytearray(train(separable, TrainConfig(epochs=1)).to_bytes())
    for mutate in (lambda d: d.__setitem__(0, 0), lambda d: d.__setitem__(100, d[100] ^ 1),
                   lambda d: d.__delitem__(slice(-5, None))):
        bad = bytearray(data)
        mutate(bad)
        with pytest.raises(CheckpointFormatError):
            Checkpoint.from_bytes(bytes(bad))
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(b"")


# ---------------------------------------------------------------------------
# classification

def test_classify_threshold_boundaries(separable):
    uniform = Checkpoint(ModelParams.zeros(separable.dims), separable.featurizer)
    rows = classify(uniform, separable)
    assert all(label == 1 and p == 0.5 for _, label, p in rows)
    assert all(label == 0 for _, label, _ in classify(uniform, separable, threshold=1 - 1e-9))
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            classify(uniform, separable, threshold=bad)


def test_classify_featurizer_mismatch(separable):
    ck = Checkpoint(ModelParams.zeros(separable.dims), FeaturizerConfig(dims=separable.dims, seed=3))
    with pytest.raises(ConfigMismatch):
        classify(ck, separable)


def test_classify_separable_f1(separable):
    assert _f1(train(separable), separable) >= 0.99


def test_tune_threshold_picks_separating_value():
    probs = [0.1, 0.2, 0.35, 0.4, 0.8]
    labels = [0, 0, 1, 1, 1]
    t = tune_threshold(probs, labels)
    assert 0.2 < t <= 0.35


def test_loss_trend_helper():
    assert loss_trend_ok([3, 2, 1, 1, 0.5])
    assert loss_trend_ok([1.0, 2.0])
    assert not loss_trend_ok([1, 1, 1, 5, 5, 5])


def test_featurized_vector_prediction_matches_dataset_path(separable):
    ck = train(separable, TrainConfig(epochs=2))
    v = separable.vector(3)
    assert predict_proba(ck.params, v) == pytest.approx(classify(ck, separable)[3][2], rel=1e-12)
    assert featurize("abc", separable.featurizer).dims == separable.dims
