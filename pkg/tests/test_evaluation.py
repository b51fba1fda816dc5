import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpbench import evaluation as E
from fpbench.datasets import gen_shapes_dataset, gen_sprite_dataset
from fpbench.evaluation import (
    EmbeddingSet,
    ProbeConfig,
    aggregate_runs,
    build_baseline_cnn,
    embed_dataset,
    format_mean_std,
    test_best_probe as best_probe,
    train_probes,
)
from fpbench.nets import build_loss_network, feature_dim
from fpbench.procedures import build_codec, make_procedure


def _blobs(n, k=3, z=6, seed=0, spread=0.05):
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(k, z)) * 4
    labels = np.arange(n) % k
    return EmbeddingSet(centres[labels] + spread * rng.normal(size=(n, z)), labels, "classification", k)


# metrics ---------------------------------------------------------------------------


def test_metric_examples():
    assert E.mean_distance(np.array([[3.0, 4.0]]), np.array([[0.0, 0.0]])) == 5.0
    labels = np.arange(100) % 10
    assert E.accuracy(np.eye(10)[labels], labels) == 1.0
    assert E.accuracy(np.tile(np.eye(10)[0], (100, 1)), labels) == pytest.approx(0.1)


def test_aggregate_runs():
    mean, std = aggregate_runs([1, 2, 3])
    assert mean == 2.0
    assert abs(std - math.sqrt(2 / 3)) < 1e-12
    assert aggregate_runs([7.5]) == (7.5, 0.0)
    with pytest.raises(ValueError):
        aggregate_runs([])
    assert format_mean_std(13.756, 5.0814) == "13.76±5.08"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=20))
def test_aggregate_matches_population_std(vals):
    mean, std = aggregate_runs(vals)
    m = sum(vals) / len(vals)
    ref = math.sqrt(sum((v - m) ** 2 for v in vals) / len(vals))
    assert mean == pytest.approx(m, abs=1e-6)
    assert std == pytest.approx(ref, rel=1e-6, abs=1e-6)


# embedding ---------------------------------------------------------------------------


def test_embed_routing_and_purity():
    data = gen_shapes_dataset(20, size=16, num_classes=4, seed=0)
    ln = build_loss_network(16, 4, seed=0).freeze()
    for name, width in [("I-I-PW", 8), ("F-F-FP", 8)]:
        spec = make_procedure(name)
        enc, _ = build_codec(spec, (3, 16, 16), feature_dim(ln), width, feature_hidden=32)
        a = embed_dataset(enc, ln, spec, data)
        b = embed_dataset(enc, ln, spec, data)
        assert a.embeddings.shape == (20, width)
        assert np.array_equal(a.embeddings, b.embeddings)
        assert a.provenance == {"procedure": name, "z": width}
    img_enc, _ = build_codec(make_procedure("I-I-PW"), (3, 16, 16), None, 8)
    with pytest.raises(ValueError):
        embed_dataset(img_enc, ln, make_procedure("F-I-PW"), data)


# probes ------------------------------------------------------------------------------


def test_probes_on_separable_embeddings():
    emb = _blobs(200)
    probes = train_probes(emb, ProbeConfig(epochs=30))
    assert [p.arch_id for p in probes] == list(range(7))
    assert all(p.model.output_shape == (3,) for p in probes)
    assert min(p.best_val_loss for p in probes) < 0.05
    result = best_probe(probes, _blobs(60, seed=0))
    assert result.value == 1.0
    assert result.best_arch_id == int(np.argmin(result.per_arch_val_losses))


def test_positioning_probe_output_dim_and_distance_bound():
    emb = EmbeddingSet(np.random.default_rng(0).normal(size=(80, 5)), np.random.default_rng(1).uniform(2, 30, (80, 2)), "positioning")
    probes = train_probes(emb, ProbeConfig(epochs=3))
    assert all(p.model.output_shape == (2,) for p in probes)
    r = best_probe(probes, emb)
    assert r.metric_kind == "mean_euclidean_distance"
    assert 0 <= r.value <= math.hypot(32, 32)


def test_probe_selection_is_stable():
    emb = _blobs(90, spread=2.0, seed=3)
    a = best_probe(train_probes(emb, ProbeConfig(epochs=5, seed=4)), emb)
    b = best_probe(train_probes(emb, ProbeConfig(epochs=5, seed=4)), emb)
    assert a == b


def test_tie_break_and_divergence_exclusion():
    emb = _blobs(30)
    probes = train_probes(emb, ProbeConfig(epochs=1))
    for p in probes:
        p.history.val_loss = [1.0]
    assert best_probe(probes, emb).best_arch_id == 0
    probes[0].diverged = True
    assert best_probe(probes, emb).best_arch_id == 1
    for p in probes:
        p.diverged = True
    with pytest.raises(RuntimeError):
        best_probe(probes, emb)


def test_probe_divergence_is_recorded(monkeypatch):
    real = E.fit_supervised

    def fit(model, *a, **k):
        if model.name.endswith("3"):
            raise E.DivergenceError("boom", E.TrainHistory())
        return real(model, *a, **k)

    monkeypatch.setattr(E, "fit_supervised", fit)
    probes = train_probes(_blobs(40), ProbeConfig(epochs=2))
    assert [p.diverged for p in probes] == [False, False, False, True, False, False, False]


def test_probe_training_leaves_encoder_untouched():
    data = gen_sprite_dataset(30, size=16, seed=0)
    spec = make_procedure("I-I-PW")
    enc, _ = build_codec(spec, (3, 16, 16), None, 6)
    before = enc.checksum()
    emb = embed_dataset(enc, None, spec, data)
    train_probes(emb, ProbeConfig(epochs=2))
    assert enc.checksum() == before


# baseline ------------------------------------------------------------------------------


def test_baseline_cnn_layout():
    m = build_baseline_cnn(32, 2)
    dense = [l.out for l in m.layers if l.kind == "dense"]
    assert dense == [256, 2]
    assert [l.out for l in m.layers if l.kind == "conv"] == [32, 64, 128, 256]
    assert m.output_shape == (2,)


def test_baseline_cnn_learns_shapes():
    train = gen_shapes_dataset(300, size=16, num_classes=3, seed=1)
    test = gen_shapes_dataset(90, size=16, num_classes=3, seed=2)
    _, result = E.train_baseline_cnn(train, test, ProbeConfig(epochs=6))
    assert result.metric_kind == "accuracy"
    assert result.value > 1 / 3
