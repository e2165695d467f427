import numpy as np
import pytest

from clusterzsl.datasets import SyntheticSpec, generate_synthetic
from clusterzsl.evalmetrics import harmonic_mean
from clusterzsl.ndcore import make_rng
from clusterzsl.objectives import joint_objective, kl_to_standard_normal, reconstruction_loss
from clusterzsl.pipeline import (ABLATION_ROWS, EpisodeSpec, SoftmaxClassifier, TrainConfig, ablation_configs,
                                 build_model, evaluate_gzsl, evaluate_zsl, gzsl_training_set, run, run_ablation,
                                 run_fewshot, sample_episode, seen_index, stage_finetune_gaussian,
                                 stage_seeds, stage_synthesize_unseen, stage_train_cvae,
                                 stage_train_final_classifier, train_gaussian_map)

TINY = dict(d_p=16, hidden=16, finetune_epochs=3, cvae_epochs=3, classifier_epochs=3, n_synth_per_unseen=10,
            batch_size=32)


@pytest.fixture(scope="module")
def tiny_data():
    return generate_synthetic(SyntheticSpec(k_seen=4, k_unseen=2, d_a=5, d_f=8, samples_per_class=30, seed=3))


def tiny_config(**kw):
    return TrainConfig(**{**TINY, **kw}).validate()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-1).validate()
    with pytest.raises(ValueError):
        TrainConfig(cvae_epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(decoder_output="tanh").validate()
    assert TrainConfig().gamma_for(64) == 1 / 64
    assert TrainConfig(gamma=0.5).gamma_for(64) == 0.5
    assert TrainConfig(use_noise=False).effective_alpha == 0.0


def test_stage_seeds_are_distinct_and_stable():
    s = stage_seeds(7)
    assert len(set(s.values())) == 4
    assert s == stage_seeds(7)


def test_seen_index(tiny_data):
    m = build_model(tiny_data, tiny_config())
    c = tiny_data.split.seen
    assert seen_index(m, c[::-1]).tolist() == list(range(c.size))[::-1]
    with pytest.raises(ValueError):
        seen_index(m, tiny_data.split.unseen)


def test_gaussian_map_reduces_loss(tiny_data):
    rows = tiny_data.train_rows
    m = build_model(tiny_data, tiny_config())
    y = seen_index(m, tiny_data.labels[rows])
    _, centers, trace = train_gaussian_map(tiny_data.features[rows], y, m.k_seen,
                                           tiny_config(finetune_epochs=20, gamma=0.2), 0)
    assert trace[-1] < trace[0]
    assert centers.shape == (8, 4)


def test_finetune_stage_toggles(tiny_data):
    m = build_model(tiny_data, tiny_config())
    assert stage_finetune_gaussian(tiny_data, m, tiny_config(use_gaussian_finetune=False)) == []
    assert not m.finetune_enabled
    trace = stage_finetune_gaussian(tiny_data, m, tiny_config())
    assert len(trace) == 3 and m.finetune_enabled


def test_cvae_stage_traces_and_loss_decrease(tiny_data):
    cfg = tiny_config(cvae_epochs=15)
    m = build_model(tiny_data, cfg)
    trace = stage_train_cvae(tiny_data, m, cfg)
    assert set(trace) == {"total", "reconstruction", "kl", "cls", "cls_prime"}
    assert all(len(v) == 15 for v in trace.values())
    assert trace["total"][-1] < trace["total"][0]


def test_flag_coherence_with_plain_cvae(tiny_data):
    """All ablation flags off and alpha 0: joint objective equals reconstruction + KL."""
    cfg = ablation_configs(tiny_config())["NA"].replace(alpha=0.0)
    m = build_model(tiny_data, cfg)
    rng = make_rng(0)
    rows = tiny_data.train_rows[:16]
    x, a = tiny_data.features[rows], tiny_data.attributes[tiny_data.labels[rows]]
    y = seen_index(m, tiny_data.labels[rows])
    ez = rng.standard_normal((16, m.d_z))
    loss, _ = joint_objective(m, x, a, y, cfg.lambda_cls, cfg.lambda_cls_prime, cfg.effective_alpha,
                              latent_eps=ez, target_eps=rng.standard_normal((16, m.d_p)))
    mu, lv = m.encode(x)
    plain = reconstruction_loss(x, m.decode(mu + np.exp(0.5 * lv) * ez, a)) + kl_to_standard_normal(mu, lv)
    assert abs(loss.total - plain) <= 1e-10


def test_synthesis_counts_and_determinism(tiny_data):
    cfg = tiny_config()
    m = build_model(tiny_data, cfg)
    x, y = stage_synthesize_unseen(m, tiny_data.attributes, tiny_data.split, cfg)
    assert x.shape == (10 * 2, 16)
    assert np.array_equal(np.unique(y), tiny_data.split.unseen)
    x2, _ = stage_synthesize_unseen(m, tiny_data.attributes, tiny_data.split, cfg)
    assert np.array_equal(x, x2)
    xs, ys = stage_synthesize_unseen(m, tiny_data.attributes, tiny_data.split, cfg, include_seen=True)
    assert xs.shape[0] == 10 * 6


def test_softmax_classifier_fits_separable_data():
    rng = make_rng(1)
    y = np.repeat([3, 8, 5], 30)
    x = 5 * np.eye(3)[np.searchsorted([3, 5, 8], y)] + 0.1 * rng.standard_normal((90, 3))
    clf = SoftmaxClassifier([3, 5, 8], 3)
    clf.fit(x, y, 50, 16, 0.05, 0)
    assert np.mean(clf.predict(x) == y) >= 0.99
    assert clf.logits(x).shape == (90, 3)
    with pytest.raises(ValueError, match="no training samples"):
        SoftmaxClassifier([1, 2], 3).fit(x[:5], np.ones(5, dtype=int), 1, 5, 0.1, 0)


def test_head_widths_and_gzsl_identity(tiny_data):
    cfg = tiny_config()
    res = run(tiny_data, cfg)
    m = res.model
    x, y = gzsl_training_set(m, tiny_data, cfg)
    classes = np.concatenate([tiny_data.split.seen, tiny_data.split.unseen])
    clf = stage_train_final_classifier(x, y, classes, cfg)
    assert clf.net.out_dim == 6
    s, u = tiny_data.test_seen_rows, tiny_data.test_unseen_rows
    r = evaluate_gzsl(clf, m, tiny_data.features[s], tiny_data.labels[s], tiny_data.features[u], tiny_data.labels[u])
    assert r.h == pytest.approx(harmonic_mean(r.s, r.u), abs=1e-12)
    assert res.metrics["gzsl_h"] == pytest.approx(harmonic_mean(res.metrics["gzsl_s"], res.metrics["gzsl_u"]),
                                                  abs=1e-12)
    with pytest.raises(ValueError):
        evaluate_gzsl(clf, m, tiny_data.features[s][:0], tiny_data.labels[s][:0], tiny_data.features[u],
                      tiny_data.labels[u])
    zsl_clf = stage_train_final_classifier(*stage_synthesize_unseen(m, tiny_data.attributes, tiny_data.split, cfg),
                                           tiny_data.split.unseen, cfg)
    assert zsl_clf.net.out_dim == 2
    with pytest.raises(ValueError, match="not classifier classes"):
        evaluate_zsl(zsl_clf, m, tiny_data.features[s], tiny_data.labels[s])


def test_run_is_deterministic(tiny_data):
    a = run(tiny_data, tiny_config())
    b = run(tiny_data, tiny_config())
    assert a.metrics == b.metrics
    assert a.model.to_bytes() == b.model.to_bytes()


def test_ablation_rows_and_flags(tiny_data):
    cfgs = ablation_configs(tiny_config())
    assert tuple(cfgs) == ABLATION_ROWS
    na = cfgs["NA"]
    assert not na.use_projection and not na.use_gaussian_finetune and na.effective_alpha == 0
    assert cfgs["CLS"].use_projection and not cfgs["CLS"].use_gaussian_finetune
    assert cfgs["CLS-GAUSSIAN"].use_gaussian_finetune and cfgs["CLS-GAUSSIAN"].effective_alpha == 0
    assert cfgs["CLS-GAUSSIAN-NOISE"].effective_alpha == 0.2
    table = run_ablation(tiny_data, tiny_config(), rows=("NA", "CLS"))
    assert set(table) == {"NA", "CLS"}
    assert 0 <= table["NA"]["nmi"] <= 1


def test_episode_sampling_contract():
    labels = np.repeat(np.arange(6), 20)
    spec = EpisodeSpec(n_way=5, k_shot=2, n_query=3, n_episodes=1)
    classes, sup, qry = sample_episode(labels, spec, make_rng(0))
    assert classes.size == 5 and sup.size == 10 and qry.size == 15
    assert not set(sup) & set(qry)
    assert set(labels[sup]) == set(classes)
    with pytest.raises(ValueError):
        sample_episode(labels, EpisodeSpec(n_way=7), make_rng(0))
    with pytest.raises(ValueError):
        sample_episode(labels, EpisodeSpec(k_shot=10, n_query=15), make_rng(0))


def test_fewshot_degenerate_and_errors():
    rng = make_rng(2)
    novel_y = np.repeat(np.arange(10, 15), 4)
    # every row of a class is identical, so one support row predicts its queries exactly
    novel_x = 3 * np.eye(5)[novel_y - 10]
    base_y = np.repeat(np.arange(3), 5)
    base_x = rng.standard_normal((15, 5))
    spec = EpisodeSpec(n_way=5, k_shot=1, n_query=3, n_episodes=5)
    cfg = tiny_config()
    res = run_fewshot(base_x, base_y, novel_x, novel_y, spec, cfg, mode="baseline")
    assert res.mean == 1.0 and res.accuracies.size == 5
    assert run_fewshot(base_x, base_y, novel_x, novel_y, spec, cfg, mode="gaussian").mean == 1.0
    with pytest.raises(ValueError, match="overlap"):
        run_fewshot(base_x, base_y, base_x, base_y, spec, cfg)
    with pytest.raises(ValueError):
        run_fewshot(base_x, base_y, novel_x, novel_y, spec, cfg, mode="svm")
