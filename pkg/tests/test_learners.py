import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rengine import nn
from rengine.buffer import buffer_create
from rengine.learners import Learner, LearnerConfig, empirical_fisher

from oracles import central_differences, max_relative_error

SPEC = nn.ModelSpec([2, 8, 4], seed=1)


def make_batch(rng, n=6):
    return nn.Batch(rng.normal(size=(n, 2)), rng.integers(0, 4, size=n))


def filled_learner(tmp_path, strategy, name="b", **kw):
    cfg = LearnerConfig(strategy, **kw)
    buf = None
    if cfg.uses_buffer:
        buf = buffer_create(20, tmp_path / name, cfg.stores_logits, feature_dim=2, num_classes=4, seed=3)
    learner = Learner(cfg, buf)
    rng = np.random.default_rng(0)
    params = nn.init_params(SPEC)
    for _ in range(4):
        learner.on_batch_end(SPEC, params, make_batch(rng), 0)
    return learner


def test_config_validation():
    with pytest.raises(ValueError):
        LearnerConfig("icarl")
    with pytest.raises(ValueError):
        LearnerConfig("er", er_weight=-1)
    with pytest.raises(ValueError):
        LearnerConfig("ewc", ewc_lambda=float("nan"))
    cfg = LearnerConfig("der_pp", alpha=0.3)
    assert LearnerConfig.from_dict(cfg.to_dict()) == cfg
    assert "lambda" in cfg.to_dict()


def test_fine_tune_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    params = nn.init_params(SPEC)
    batch = make_batch(rng)
    out, grad = Learner(LearnerConfig("fine_tune")).training_step(SPEC, params, batch, rng)
    loss, ref = nn.loss_and_grad(SPEC, params, batch)
    assert out.total == loss and np.array_equal(grad, ref)
    assert out.terms == {"new_ce": loss}


@pytest.mark.parametrize(
    "strategy,kw",
    [
        ("er", {"er_weight": 0.0}),
        ("der", {"alpha": 0.0}),
        ("der_pp", {"alpha": 0.0, "beta": 0.0}),
        ("ewc", {"ewc_lambda": 0.0}),
    ],
)
def test_reduction_to_fine_tune(tmp_path, strategy, kw):
    learner = filled_learner(tmp_path, strategy, **kw)
    if strategy == "ewc":
        learner.ewc_anchor = np.zeros(SPEC.num_params)
        learner.ewc_fisher = np.ones(SPEC.num_params)
    params = np.random.default_rng(5).normal(size=SPEC.num_params)
    batch = make_batch(np.random.default_rng(6))
    a, ga = learner.training_step(SPEC, params, batch, np.random.default_rng(7))
    b, gb = Learner(LearnerConfig("fine_tune")).training_step(SPEC, params, batch, np.random.default_rng(7))
    assert a.total == b.total and a.terms == b.terms
    assert np.array_equal(ga, gb)


def test_er_term_and_breakdown(tmp_path):
    learner = filled_learner(tmp_path, "er", er_weight=0.7, memory_batch_size=5)
    params = nn.init_params(SPEC)
    out, _ = learner.training_step(SPEC, params, make_batch(np.random.default_rng(1)), np.random.default_rng(2))
    assert set(out.terms) == {"new_ce", "mem_ce"}
    assert out.total == pytest.approx(sum(out.weights[k] * v for k, v in out.terms.items()), abs=1e-10)


def test_er_skips_memory_when_empty(tmp_path):
    cfg = LearnerConfig("er")
    buf = buffer_create(5, tmp_path / "b", feature_dim=2, num_classes=4)
    out, _ = Learner(cfg, buf).training_step(SPEC, nn.init_params(SPEC), make_batch(np.random.default_rng(0)), np.random.default_rng(0))
    assert set(out.terms) == {"new_ce"}


def test_der_pp_terms(tmp_path):
    learner = filled_learner(tmp_path, "der_pp", alpha=0.5, beta=0.25)
    out, _ = learner.training_step(SPEC, nn.init_params(SPEC), make_batch(np.random.default_rng(1)), np.random.default_rng(2))
    assert set(out.terms) == {"new_ce", "mem_mse", "mem_ce"}
    assert out.weights["mem_mse"] == 0.5 and out.weights["mem_ce"] == 0.25
    assert out.total == pytest.approx(sum(out.weights[k] * v for k, v in out.terms.items()), abs=1e-10)


def test_der_requires_logit_buffer(tmp_path):
    buf = buffer_create(5, tmp_path / "b", feature_dim=2, num_classes=4)
    with pytest.raises(ValueError, match="logits"):
        Learner(LearnerConfig("der"), buf)


def test_der_stores_current_logits(tmp_path):
    cfg = LearnerConfig("der")
    buf = buffer_create(50, tmp_path / "b", True, feature_dim=2, num_classes=4)
    learner = Learner(cfg, buf)
    params = np.random.default_rng(3).normal(size=SPEC.num_params)
    batch = make_batch(np.random.default_rng(4))
    learner.on_batch_end(SPEC, params, batch, 0)
    stored = np.array([r.logits for r in buf.all_records()])
    np.testing.assert_array_equal(stored, nn.forward(SPEC, params, batch))


def test_er_holds_whole_task_when_capacity_allows(tmp_path):
    buf = buffer_create(100, tmp_path / "b", feature_dim=2, num_classes=4)
    learner = Learner(LearnerConfig("er"), buf)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 2))
    y = rng.integers(0, 4, size=60)
    for lo in range(0, 60, 16):
        learner.on_batch_end(SPEC, nn.init_params(SPEC), nn.Batch(x[lo : lo + 16], y[lo : lo + 16]), 0)
    got = sorted((tuple(r.features), r.label) for r in buf.all_records())
    assert got == sorted(zip(map(tuple, x), y.tolist()))


def test_fine_tune_has_no_buffer():
    learner = Learner(LearnerConfig("fine_tune"))
    learner.on_batch_end(SPEC, nn.init_params(SPEC), make_batch(np.random.default_rng(0)), 0)
    assert learner.buffer is None


def test_ewc_penalty_zero_at_anchor():
    learner = Learner(LearnerConfig("ewc", ewc_lambda=3.0))
    theta = np.random.default_rng(0).normal(size=SPEC.num_params)
    learner.ewc_anchor = theta.copy()
    learner.ewc_fisher = np.abs(theta)
    value, grad = learner.ewc_penalty(theta)
    assert value == 0.0 and np.all(grad == 0.0)


def test_ewc_penalty_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    learner = Learner(LearnerConfig("ewc", ewc_lambda=2.5))
    learner.ewc_anchor = rng.normal(size=SPEC.num_params)
    learner.ewc_fisher = rng.uniform(0, 2, size=SPEC.num_params)
    theta = rng.normal(size=SPEC.num_params)
    _, grad = learner.ewc_penalty(theta)
    num = central_differences(lambda p: learner.ewc_penalty(p)[0], theta)
    assert max_relative_error(grad, num) < 1e-6


def test_ewc_penalty_independent_of_batch():
    rng = np.random.default_rng(2)
    learner = Learner(LearnerConfig("ewc", ewc_lambda=1.0))
    learner.ewc_anchor = rng.normal(size=SPEC.num_params)
    learner.ewc_fisher = rng.uniform(size=SPEC.num_params)
    theta = rng.normal(size=SPEC.num_params)
    a, _ = learner.training_step(SPEC, theta, make_batch(rng), rng)
    b, _ = learner.training_step(SPEC, theta, make_batch(rng, 3), rng)
    assert a.terms["ewc_penalty"] == b.terms["ewc_penalty"]


def test_fisher_zero_for_saturated_model():
    spec = nn.ModelSpec([1, 2])
    params = np.array([0.0, 0.0, 60.0, -60.0])  # logits (60, -60) for every input
    fisher = empirical_fisher(spec, params, np.ones((5, 1)), np.zeros(5, dtype=int))
    assert np.all(fisher < 1e-40)


def test_fisher_matches_logistic_closed_form():
    # two-class linear model with only the class-1 weight free acts as 1D logistic regression:
    # d CE / d w = (sigmoid(w x) - y) x
    spec = nn.ModelSpec([1, 2])
    w = 0.7
    params = np.array([0.0, w, 0.0, 0.0])
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 1))
    y = rng.integers(0, 2, size=40)
    fisher = empirical_fisher(spec, params, x, y, max_samples=1024)
    sig = 1 / (1 + np.exp(-w * x[:, 0]))
    expected = np.mean(((sig - y) * x[:, 0]) ** 2)
    assert fisher[1] == pytest.approx(expected, rel=1e-12)


def test_fisher_accumulates_over_tasks():
    rng = np.random.default_rng(3)
    learner = Learner(LearnerConfig("ewc"))
    params = rng.normal(size=SPEC.num_params)
    x1, y1 = rng.normal(size=(20, 2)), rng.integers(0, 4, 20)
    x2, y2 = rng.normal(size=(20, 2)), rng.integers(0, 4, 20)
    learner.on_task_end(SPEC, params, x1, y1, 0, seed=1)
    learner.on_task_end(SPEC, params, x2, y2, 1, seed=2)
    expected = empirical_fisher(SPEC, params, x1, y1, seed=1) + empirical_fisher(SPEC, params, x2, y2, seed=2)
    np.testing.assert_array_equal(learner.ewc_fisher, expected)
    assert learner.tasks_seen == 2
    with pytest.raises(ValueError):
        learner.on_task_end(SPEC, params, x1[:0], y1[:0], 2)


def test_learner_save_load_round_trip(tmp_path):
    learner = filled_learner(tmp_path / "state", "der", name="buffer", alpha=0.2)
    learner.on_task_end(SPEC, nn.init_params(SPEC), None, None, 0)
    files = learner.save(tmp_path / "state")
    assert files == ["learner.json"]
    back = Learner.load(tmp_path / "state", SPEC.num_params)
    assert back.config == learner.config and back.task_ids == [0]
    assert back.buffer.manifest == learner.buffer.manifest

    ewc = Learner(LearnerConfig("ewc"))
    rng = np.random.default_rng(0)
    ewc.on_task_end(SPEC, rng.normal(size=SPEC.num_params), rng.normal(size=(10, 2)), rng.integers(0, 4, 10), 0)
    (tmp_path / "e").mkdir()
    assert ewc.save(tmp_path / "e") == ["learner.json", "ewc_anchor.bin", "ewc_fisher.bin"]
    back = Learner.load(tmp_path / "e", SPEC.num_params)
    assert np.array_equal(back.ewc_anchor, ewc.ewc_anchor) and np.array_equal(back.ewc_fisher, ewc.ewc_fisher)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_fisher_nonnegative_after_updates(seed, tasks):
    rng = np.random.default_rng(seed)
    learner = Learner(LearnerConfig("ewc", fisher_samples=16))
    for t in range(tasks):
        learner.on_task_end(SPEC, rng.normal(size=SPEC.num_params), rng.normal(size=(8, 2)), rng.integers(0, 4, 8), t, seed=t)
    assert np.all(learner.ewc_fisher >= 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["er", "der", "der_pp", "ewc", "fine_tune"]))
def test_training_step_deterministic(tmp_path_factory, seed, strategy):
    d = tmp_path_factory.mktemp("det")
    learner = filled_learner(d, strategy)
    if strategy == "ewc":
        learner.ewc_anchor = np.zeros(SPEC.num_params)
        learner.ewc_fisher = np.ones(SPEC.num_params)
    params = np.random.default_rng(seed).normal(size=SPEC.num_params)
    batch = make_batch(np.random.default_rng(seed + 1))
    a = learner.training_step(SPEC, params, batch, np.random.default_rng(seed))
    b = learner.training_step(SPEC, params, batch, np.random.default_rng(seed))
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
