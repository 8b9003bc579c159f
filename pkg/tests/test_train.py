import math

import numpy as np
import pytest

from histograph.gcn import Gradients, build_model, model_forward
from histograph.synth import SynthConfig, generate_dataset
from histograph.train import (
    FeatureStats,
    OptimizerState,
    TrainConfig,
    TrainingManifest,
    adam_step,
    apply_standardization,
    evaluate,
    load_manifest,
    save_manifest,
    standardize_features,
    train,
)

TINY = TrainConfig(lr=5e-3, batch_size=4, max_epochs=120, patience=120,
                   conv_widths=(8, 6), pool_k=3, dense_widths=(6,))


def tiny_configs():
    base = dict(canvas=(256, 256), n_points=(25, 40), n_clusters=(2, 3),
                cluster_radius=(25.0, 45.0), edge_radius=60.0)
    return (SynthConfig(kind="clustered", **base),
            SynthConfig(kind="dispersed", **base))


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyset")
    return generate_dataset(tiny_configs(), n_per_class=6, seed=11, out_dir=out)


# ---------------------------------------------------------------------------
# Adam against a scalar-by-scalar oracle
# ---------------------------------------------------------------------------

def adam_oracle(p, g, m, v, t, lr, b1, b2, eps):
    """Textbook bias-corrected update on python floats."""
    m = b1 * m + (1.0 - b1) * g
    v = b2 * v + (1.0 - b2) * g * g
    upd = lr * (m / (1.0 - b1 ** t)) / (math.sqrt(v / (1.0 - b2 ** t)) + eps)
    return p - upd, m, v


def test_adam_step_matches_scalar_oracle(rng):
    model = build_model(4, 2, conv_widths=(3,), pool_k=2, dense_widths=(3,), seed=2)
    state = OptimizerState.init(model, lr=0.01, beta1=0.9, beta2=0.999, epsilon=1e-8)
    shadow = {}  # (tensor index, flat index) -> (p, m, v)
    for ti, t in enumerate(model.tensors()):
        for i, p in enumerate(t.ravel()):
            shadow[ti, i] = (float(p), 0.0, 0.0)

    for step in range(1, 6):
        grads = Gradients([rng.normal(size=t.shape) for t in model.tensors()])
        model, state = adam_step(model, grads, state)
        assert state.step == step
        for ti, t in enumerate(model.tensors()):
            gflat = grads.tensors[ti].ravel()
            for i, got in enumerate(t.ravel()):
                p, m, v = shadow[ti, i]
                p, m, v = adam_oracle(p, float(gflat[i]), m, v, step,
                                      0.01, 0.9, 0.999, 1e-8)
                shadow[ti, i] = (p, m, v)
                assert got == pytest.approx(p, rel=1e-14, abs=1e-300)


def test_adam_first_step_is_signed_lr():
    # bias correction makes step 1 equal lr * g / (|g| + eps) ~ lr * sign(g)
    model = build_model(3, 2, conv_widths=(2,), pool_k=2, dense_widths=(2,), seed=0)
    state = OptimizerState.init(model, lr=0.1)
    grads = Gradients([np.full(t.shape, 2.5) for t in model.tensors()])
    before = [t.copy() for t in model.tensors()]
    model, state = adam_step(model, grads, state)
    for b, a in zip(before, model.tensors()):
        np.testing.assert_allclose(b - a, 0.1, rtol=1e-7)


def test_adam_zero_gradient_leaves_params_unchanged():
    model = build_model(3, 2, conv_widths=(2,), pool_k=2, dense_widths=(2,), seed=1)
    state = OptimizerState.init(model)
    before = [t.copy() for t in model.tensors()]
    model, state = adam_step(model, Gradients([np.zeros_like(t) for t in before]),
                             state)
    assert state.step == 1
    for b, a in zip(before, model.tensors()):
        np.testing.assert_array_equal(b, a)


def test_adam_step_shape_checks(rng):
    model = build_model(3, 2, conv_widths=(2,), pool_k=2, dense_widths=(2,), seed=0)
    state = OptimizerState.init(model)
    with pytest.raises(ValueError, match="shape mismatch"):
        adam_step(model, Gradients([np.zeros(1)]), state)
    bad = [np.zeros_like(t) for t in model.tensors()]
    bad[0] = np.zeros((1, 1))
    with pytest.raises(ValueError, match="shape mismatch"):
        adam_step(model, Gradients(bad), state)


# ---------------------------------------------------------------------------
# standardization
# ---------------------------------------------------------------------------

def test_standardize_features_matches_pooled_moments(rng):
    from conftest import random_histograph

    graphs = [random_histograph(rng, f=5) for _ in range(4)]
    stats = standardize_features(graphs)
    pooled = np.vstack([g.features.values for g in graphs])
    np.testing.assert_allclose(stats.mean, pooled.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(stats.std, pooled.std(axis=0), atol=1e-12)

    z = np.vstack([apply_standardization(g, stats).features.values for g in graphs])
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-10)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-10)


def test_standardize_features_floors_constant_dims(rng):
    from conftest import random_histograph

    graphs = [random_histograph(rng, n=6, f=4) for _ in range(3)]
    for g in graphs:
        g.features.values[:, 2] = 7.0  # constant dimension
    stats = standardize_features(graphs)
    assert stats.std[2] == 1e-8
    z = apply_standardization(graphs[0], stats)
    np.testing.assert_allclose(z.features.values[:, 2], 0.0, atol=1e-6)
    # adjacency and coordinates are untouched
    np.testing.assert_array_equal(z.adjacency.weights, graphs[0].adjacency.weights)
    np.testing.assert_array_equal(z.nuclei.coords, graphs[0].nuclei.coords)


def test_standardize_features_needs_two_graphs(rng):
    from conftest import random_histograph

    with pytest.raises(ValueError, match="at least 2"):
        standardize_features([random_histograph(rng)])


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_manifest_roundtrip_and_relative_paths(tmp_path):
    save_manifest([("graphs/a.json", 0), ("graphs/b.json", 1)],
                  tmp_path / "manifest.csv")
    m = load_manifest(tmp_path / "manifest.csv")
    assert m.classes == ("0", "1")
    paths = [p for p, _ in m.entries]
    assert paths[0] == str(tmp_path / "graphs/a.json")
    assert [label for _, label in m.entries] == [0, 1]


def test_manifest_absolute_paths_kept(tmp_path):
    save_manifest([("/abs/x.json", 0), ("y.json", 1)], tmp_path / "m.csv")
    m = load_manifest(tmp_path / "m.csv")
    assert m.entries[0][0] == "/abs/x.json"
    assert m.entries[1][0] == str(tmp_path / "y.json")


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("file,cls\na.json,0\n")
    with pytest.raises(ValueError, match="header"):
        load_manifest(p)
    p.write_text("path,label\na.json,zero\n")
    with pytest.raises(ValueError, match="line 2.*non-integer"):
        load_manifest(p)
    p.write_text("path,label\na.json,-1\n")
    with pytest.raises(ValueError, match="negative label"):
        load_manifest(p)
    p.write_text("path,label\na.json,0\na.json,1\n")
    with pytest.raises(ValueError, match="unique"):
        load_manifest(p)
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "none.csv")


def test_manifest_label_range_validation():
    with pytest.raises(ValueError, match="out of range"):
        TrainingManifest((("a.json", 5),), ("0", "1"))


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_train_config_validation():
    assert TrainConfig().batch_size == 8
    assert TrainConfig().max_epochs == 300
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="betas"):
        TrainConfig(beta1=1.0)
    with pytest.raises(ValueError, match="epsilon"):
        TrainConfig(epsilon=0.0)
    with pytest.raises(ValueError, match=">= 1"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="conv_widths"):
        TrainConfig(conv_widths=())


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_train_overfits_tiny_dataset(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    result = train(manifest, TINY, seed=0)
    assert max(r.accuracy for r in result.log) == 1.0
    assert result.log[-1].loss < result.log[0].loss
    assert len(result.log) <= TINY.max_epochs


def test_train_loss_smoothed_over_ten_epochs_never_rises(tmp_path):
    # overfitting eight graphs: the raw loss may wiggle, but its 10-epoch
    # moving average should only go down
    paths = generate_dataset(tiny_configs(), n_per_class=4, seed=21,
                             out_dir=tmp_path)
    result = train(load_manifest(paths["manifest"]), TINY, seed=0)
    assert max(r.accuracy for r in result.log) == 1.0
    losses = np.array([r.loss for r in result.log])
    smoothed = np.convolve(losses, np.full(10, 0.1), mode="valid")
    assert np.all(np.diff(smoothed) <= 0.0)


def test_train_deterministic_per_seed(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    config = TrainConfig(lr=5e-3, batch_size=4, max_epochs=5, patience=5,
                         conv_widths=(8, 6), pool_k=3, dense_widths=(6,))
    a = train(manifest, config, seed=7)
    b = train(manifest, config, seed=7)
    for ta, tb in zip(a.model.tensors(), b.model.tensors()):
        np.testing.assert_array_equal(ta, tb)
    assert [(r.loss, r.accuracy) for r in a.log] == [(r.loss, r.accuracy) for r in b.log]

    c = train(manifest, config, seed=8)
    assert any(np.any(ta != tc) for ta, tc in zip(a.model.tensors(), c.model.tensors()))


def test_train_stats_come_from_training_pool(tiny_dataset):
    from histograph.graph import deserialize

    manifest = load_manifest(tiny_dataset["train"])
    config = TrainConfig(max_epochs=2, conv_widths=(8,), pool_k=2, dense_widths=(4,))
    result = train(manifest, config, seed=0)
    graphs = [deserialize(p) for p, _ in manifest.entries]
    expected = standardize_features(graphs)
    np.testing.assert_array_equal(result.stats.mean, expected.mean)
    np.testing.assert_array_equal(result.stats.std, expected.std)


def test_train_runs_all_epochs_without_early_stop(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    config = TrainConfig(max_epochs=4, patience=50, conv_widths=(8,), pool_k=2,
                         dense_widths=(4,))
    result = train(manifest, config, seed=0)
    assert [r.epoch for r in result.log] == [1, 2, 3, 4]


def test_train_early_stops_when_loss_diverges(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    config = TrainConfig(lr=1e5, max_epochs=200, patience=3, conv_widths=(8,),
                         pool_k=2, dense_widths=(4,))
    result = train(manifest, config, seed=0)
    assert len(result.log) < 200


def test_train_progress_callback_sees_every_epoch(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    config = TrainConfig(max_epochs=3, conv_widths=(8,), pool_k=2, dense_widths=(4,))
    seen = []
    result = train(manifest, config, seed=0, progress=seen.append)
    assert [r.epoch for r in seen] == [r.epoch for r in result.log] == [1, 2, 3]


def test_train_rejects_degenerate_manifests(tmp_path, tiny_dataset):
    with pytest.raises(ValueError, match="manifest is empty"):
        train(TrainingManifest((), ()), TINY)
    full = load_manifest(tiny_dataset["manifest"])
    one_class = TrainingManifest(tuple((p, l) for p, l in full.entries if l == 0),
                                 full.classes)
    with pytest.raises(ValueError, match="at least 2 classes"):
        train(one_class, TINY)


def test_train_reports_unreadable_graph(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    save_manifest([("bad.json", 0), ("bad.json", 1)], tmp_path / "m.csv")
    with pytest.raises(ValueError, match="unique"):
        load_manifest(tmp_path / "m.csv")
    other = tmp_path / "other.json"
    other.write_text("{}")
    save_manifest([("bad.json", 0), ("other.json", 1)], tmp_path / "m.csv")
    with pytest.raises(ValueError, match="cannot load graph"):
        train(load_manifest(tmp_path / "m.csv"), TINY)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def test_evaluate_matches_manual_metrics(tiny_dataset):
    from histograph.graph import deserialize
    from histograph.train import _prepare

    manifest = load_manifest(tiny_dataset["manifest"])
    result = train(manifest, TINY, seed=0)
    report = evaluate(manifest, result.model, result.stats)

    # independent recount: explicit loops over graphs and classes
    graphs = _prepare([deserialize(p) for p, _ in manifest.entries], result.stats)
    labels = [l for _, l in manifest.entries]
    confusion = [[0, 0], [0, 0]]
    for g, label in zip(graphs, labels):
        logits = model_forward(g, result.model)
        pred = min(i for i in range(2) if logits[i] == logits.max())
        confusion[label][pred] += 1
    total = sum(sum(row) for row in confusion)
    accuracy = (confusion[0][0] + confusion[1][1]) / total
    assert report.accuracy == accuracy
    np.testing.assert_array_equal(report.confusion, confusion)
    for c in range(2):
        col = confusion[0][c] + confusion[1][c]
        row = confusion[c][0] + confusion[c][1]
        precision = confusion[c][c] / col if col else 0.0
        recall = confusion[c][c] / row if row else 0.0
        assert report.precision[c] == precision
        assert report.recall[c] == recall


def test_evaluate_is_order_independent_and_repeatable(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    config = TrainConfig(max_epochs=2, conv_widths=(8,), pool_k=2, dense_widths=(4,))
    result = train(manifest, config, seed=3)

    base = evaluate(manifest, result.model, result.stats)
    again = evaluate(manifest, result.model, result.stats)
    assert (base.accuracy, base.loss) == (again.accuracy, again.loss)

    reordered = TrainingManifest(tuple(reversed(manifest.entries)), manifest.classes)
    shuffled = evaluate(reordered, result.model, result.stats)
    assert shuffled.accuracy == base.accuracy
    np.testing.assert_array_equal(shuffled.confusion, base.confusion)
    np.testing.assert_array_equal(shuffled.precision, base.precision)
    np.testing.assert_array_equal(shuffled.recall, base.recall)
    # mean loss is summed in manifest order; allow reordering rounding only
    assert shuffled.loss == pytest.approx(base.loss, rel=1e-12)


def test_evaluate_constant_logit_model_breaks_ties_to_class_zero(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    model = build_model(54, 2, conv_widths=(8,), pool_k=2, dense_widths=(4,), seed=0)
    zeroed = model.replace_tensors([np.zeros_like(t) for t in model.tensors()])
    stats = FeatureStats(np.zeros(54), np.ones(54))
    report = evaluate(manifest, zeroed, stats)
    # all logits equal -> every graph predicted as class 0; classes balanced
    assert report.accuracy == 0.5
    np.testing.assert_array_equal(report.confusion[:, 1], 0)
    assert report.confusion[0, 0] == report.confusion[1, 0] == 6


def test_evaluate_report_formats(tiny_dataset):
    manifest = load_manifest(tiny_dataset["manifest"])
    config = TrainConfig(max_epochs=2, conv_widths=(8,), pool_k=2, dense_widths=(4,))
    result = train(manifest, config, seed=0)
    report = evaluate(manifest, result.model, result.stats)
    text = report.to_text()
    assert "accuracy:" in text and "confusion" in text and "precision" in text
    doc = report.to_dict()
    assert set(doc) == {"accuracy", "loss", "confusion", "precision", "recall"}
    assert np.asarray(doc["confusion"]).sum() == len(manifest.entries)
