import csv
import io
import math

import numpy as np
import pytest
from scipy import stats

from rengine.hpo import (
    Choice,
    ConfigSpace,
    Decision,
    Fixed,
    HPOError,
    LogUniform,
    RandInt,
    SchedulerState,
    Uniform,
    append_history,
    asha_decide,
    asha_search,
    run_hpo,
    sample_config,
    warm_start,
)
from rengine.learners import LearnerConfig
from rengine.runner import LocalBackend
from rengine.updater import UpdateJobConfig, load_state, run_update

from oracles import synchronous_sha


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


# -- config space -------------------------------------------------------------


def test_dims_reject_bad_ranges():
    with pytest.raises(ValueError):
        Uniform(1.0, 1.0)
    with pytest.raises(ValueError):
        LogUniform(0.0, 1.0)
    with pytest.raises(ValueError):
        RandInt(3, 2)
    with pytest.raises(ValueError):
        Choice(())
    with pytest.raises(ValueError):
        ConfigSpace({"lr": {"gaussian": [0, 1]}})


def test_fixed_space_always_same():
    space = ConfigSpace({"learning_rate": 0.1, "er_weight": {"fixed": 2.0}})
    rng = np.random.default_rng(0)
    assert space.is_fixed
    assert all(sample_config(space, rng) == {"learning_rate": 0.1, "er_weight": 2.0} for _ in range(5))


def test_randint_degenerate():
    rng = np.random.default_rng(0)
    assert {RandInt(1, 1).sample(rng) for _ in range(20)} == {1}
    vals = {RandInt(2, 4).sample(rng) for _ in range(200)}
    assert vals == {2, 3, 4} and all(isinstance(v, int) for v in vals)


def test_uniform_and_choice_support():
    rng = np.random.default_rng(0)
    u = [Uniform(-1, 3).sample(rng) for _ in range(1000)]
    assert min(u) >= -1 and max(u) <= 3
    c = [Choice(("a", "b", "c")).sample(rng) for _ in range(3000)]
    assert stats.chisquare([c.count(k) for k in "abc"]).pvalue > 0.01


def test_loguniform_ks():
    rng = np.random.default_rng(1)
    dim = LogUniform(1e-4, 1e-1)
    x = np.array([dim.sample(rng) for _ in range(10**5)])
    assert x.min() >= 1e-4 and x.max() <= 1e-1
    u = (np.log(x) - math.log(1e-4)) / (math.log(1e-1) - math.log(1e-4))
    assert stats.kstest(u, "uniform").pvalue > 0.01


def test_sampling_deterministic_per_rng():
    space = ConfigSpace({"learning_rate": {"loguniform": [1e-3, 1]}, "batch_size": {"randint": [8, 64]}})
    a = [space.sample(np.random.default_rng(4)) for _ in range(3)]
    b = [space.sample(np.random.default_rng(4)) for _ in range(3)]
    assert a == b


def test_parse_round_trips_csv_cells():
    assert Choice((0.1, 0.3)).parse("0.3") == 0.3
    assert Choice(("a", "b")).parse("b") == "b"
    assert RandInt(1, 5).parse("4") == 4
    assert Fixed(True).parse("True") is True


# -- scheduler ----------------------------------------------------------------


def test_rungs():
    assert SchedulerState(r_max=9).rungs == [1, 3, 9]
    s = SchedulerState(r_max=5)
    assert s.rungs == [1, 3] and s.report_epochs == [1, 3, 5]
    with pytest.raises(ValueError):
        SchedulerState(r_max=5, eta=1)
    with pytest.raises(ValueError):
        SchedulerState(r_max=1, r_min=2)


def test_first_report_promotable():
    s = SchedulerState(r_max=9)
    assert asha_decide(s, 0, 1, 0.3) == Decision.PROMOTABLE


def test_hand_enumerated_stop():
    s = SchedulerState(r_max=9, eta=3, mode="max")
    for tid, v in enumerate([0.9, 0.5, 0.7]):
        asha_decide(s, tid, 1, v)
    assert asha_decide(s, 3, 1, 0.6) == Decision.STOP
    assert s.top(1) == [0, 2]


def test_ties_go_to_lower_trial_id():
    s = SchedulerState(r_max=9, eta=2)
    for tid in (5, 2, 7, 1):
        asha_decide(s, tid, 1, 0.5)
    assert s.top(1) == [1, 2]


def test_non_rung_report_rejected():
    s = SchedulerState(r_max=9)
    with pytest.raises(ValueError):
        asha_decide(s, 0, 2, 0.1)
    asha_decide(s, 0, 9, 0.1)
    with pytest.raises(ValueError):
        asha_decide(s, 0, 9, 0.2)


def test_complete_at_r_max():
    s = SchedulerState(r_max=3)
    assert asha_decide(s, 0, 3, 0.1) == Decision.COMPLETE


def test_min_mode():
    s = SchedulerState(r_max=9, mode="min")
    asha_decide(s, 0, 1, 0.2)
    assert asha_decide(s, 1, 1, 0.9) == Decision.STOP
    assert asha_decide(s, 2, 1, 0.1) == Decision.PROMOTABLE


def curves27(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(27):
        a, rate = rng.uniform(0.2, 0.9), rng.uniform(0.05, 1.0)
        out.append({e: a * (1 - math.exp(-rate * e)) for e in range(1, 10)})
    return out


def test_cohort_schedule_matches_synchronous_sha(tmp_path):
    curves = curves27()
    space = ConfigSpace({"curve": Choice(tuple(range(27)))})
    res = asha_search(
        space,
        "trainables:curve",
        tmp_path,
        r_max=9,
        eta=3,
        max_trials=27,
        initial_configs=[{"curve": i} for i in range(27)],
        payload={"curves": [{str(k): v for k, v in c.items()} for c in curves]},
        schedule="cohort",
    )
    oracle = synchronous_sha(curves, 3, [1, 3, 9])
    for r in (1, 3, 9):
        got = sorted(tid for tid, _ in res.scheduler.records[r])
        assert got == oracle[r]


def test_asha_never_exceeds_r_max_and_stops_at_rungs(tmp_path):
    curves = curves27(1)
    space = ConfigSpace({"curve": Choice(tuple(range(27)))})
    res = asha_search(
        space,
        "trainables:curve",
        tmp_path,
        r_max=9,
        max_trials=20,
        seed=3,
        payload={"curves": [{str(k): v for k, v in c.items()} for c in curves]},
    )
    assert len(res.trials) == 20
    for t in res.trials:
        epochs = [e for e, _ in t.reports]
        assert epochs == sorted(set(epochs)) and epochs[-1] in (1, 3, 9)
        assert t.status in ("stopped", "completed")
        assert (t.status == "completed") == (epochs[-1] == 9)
    all_values = [float(r["metric_value"]) for r in rows(res.summary_csv)]
    assert res.best_trial.best("max") == max(all_values)


def test_planted_optimum(tmp_path):
    grid = (1e-4, 1e-3, 1e-2, 3e-2, 1e-1, 1.0)
    res = asha_search(
        ConfigSpace({"learning_rate": Choice(grid)}),
        "trainables:planted",
        tmp_path,
        r_max=9,
        max_trials=24,
        payload={"lr_star": 3e-2},
        seed=0,
    )
    assert res.best_trial.config["learning_rate"] == 3e-2


def test_same_seed_same_csv(tmp_path):
    def go(d):
        return asha_search(
            ConfigSpace({"learning_rate": {"loguniform": [1e-3, 1.0]}}),
            "trainables:planted",
            d,
            r_max=9,
            max_trials=10,
            payload={"lr_star": 0.1},
            seed=7,
        ).summary_csv

    assert go(tmp_path / "a") == go(tmp_path / "b")


def test_summary_csv_schema(tmp_path):
    res = asha_search(
        ConfigSpace({"learning_rate": Choice((0.1, 0.2)), "er_weight": Fixed(1.0)}),
        "trainables:planted",
        tmp_path,
        r_max=3,
        max_trials=2,
        payload={"lr_star": 0.1},
    )
    header = res.summary_csv.splitlines()[0]
    assert header == "trial_id,learning_rate,er_weight,epoch,metric_name,metric_value,status,rung,wall_time_s"


def test_max_time_budget_blocks_new_trials(tmp_path):
    ticks = iter(range(1000))
    res = asha_search(
        ConfigSpace({"value": Uniform(0, 1)}),
        "trainables:slow",
        tmp_path,
        r_max=3,
        max_time=2.5,
        payload={"sleep": 0.0},
        clock=lambda: float(next(ticks)),
    )
    assert 1 <= len(res.trials) <= 3


def test_failed_trials_replaced_and_zero_results_error(tmp_path):
    res = asha_search(
        ConfigSpace({"fail_at": Choice((1, None))}),
        "trainables:slow",
        tmp_path / "mixed",
        r_max=3,
        max_trials=3,
        payload={"sleep": 0.0},
        initial_configs=[{"fail_at": 1}, {"fail_at": None}],
    )
    statuses = [t.status for t in res.trials]
    assert statuses[0] == "failed"
    assert sum(s != "failed" for s in statuses) == 3
    with pytest.raises(HPOError) as info:
        asha_search(
            ConfigSpace({"fail_at": Fixed(1)}),
            "trainables:slow",
            tmp_path / "bad",
            r_max=3,
            max_trials=2,
            payload={"sleep": 0.0},
        )
    assert info.value.partial_csv.startswith("trial_id,fail_at,")


# -- warm start ---------------------------------------------------------------


HISTORY = """update_counter,trial_id,learning_rate,epoch,metric_name,metric_value,status,rung,wall_time_s
1,0,0.1,1,val_accuracy,0.5,stopped,0,0.0
1,1,0.3,1,val_accuracy,0.7,completed,0,0.0
1,1,0.3,3,val_accuracy,0.8,completed,1,0.0
1,2,0.01,1,val_accuracy,0.75,stopped,0,0.0
1,3,0.3,1,val_accuracy,0.6,stopped,0,0.0
"""


def test_warm_start_top_k_sort_oracle():
    space = ConfigSpace({"learning_rate": Choice((0.01, 0.1, 0.3))})
    got = warm_start(HISTORY, space, 3, "max", "val_accuracy")
    best = {}
    for r in rows(HISTORY):
        best[r["trial_id"]] = max(best.get(r["trial_id"], -1), float(r["metric_value"]))
    order = sorted(best, key=lambda t: -best[t])
    expected = []
    for t in order:
        cfg = {"learning_rate": float(next(r for r in rows(HISTORY) if r["trial_id"] == t)["learning_rate"])}
        if cfg not in expected:
            expected.append(cfg)
    assert got == expected[:3]
    assert warm_start(HISTORY, space, 1, "max")[0] == {"learning_rate": 0.3}


def test_warm_start_single_config_no_duplicates():
    hist = HISTORY.splitlines()[0] + "\n" + "1,0,0.1,1,val_accuracy,0.5,stopped,0,0.0\n1,0,0.1,3,val_accuracy,0.6,completed,1,0.0\n"
    space = ConfigSpace({"learning_rate": Choice((0.1, 0.3))})
    assert warm_start(hist, space, 3, "max") == [{"learning_rate": 0.1}]


def test_warm_start_incompatible_schema_warns(caplog):
    space = ConfigSpace({"momentum": Choice((0.0, 0.9))})
    assert warm_start(HISTORY, space, 2, "max") == []
    assert "sampling from scratch" in caplog.text


def test_warm_start_uses_latest_update_only():
    extra = HISTORY + "2,0,0.01,1,val_accuracy,0.1,stopped,0,0.0\n"
    space = ConfigSpace({"learning_rate": Choice((0.01, 0.1, 0.3))})
    assert warm_start(extra, space, 2, "max") == [{"learning_rate": 0.01}]


def test_append_history_adds_counter_column():
    summary = "trial_id,learning_rate,epoch,metric_name,metric_value,status,rung,wall_time_s\n0,0.1,1,val_accuracy,0.5,stopped,0,0.0\n"
    h = append_history("", summary, 1)
    h = append_history(h, summary, 2)
    r = rows(h)
    assert list(r[0])[:2] == ["update_counter", "trial_id"]
    assert [x["update_counter"] for x in r] == ["1", "2"]


# -- model-update trials ------------------------------------------------------


def small_job(**kw):
    return UpdateJobConfig(LearnerConfig("er", buffer_capacity=40), learning_rate=0.05, momentum=0.9, max_epochs=3, **kw)


def test_single_fixed_trial_equals_run_update(tmp_path, small_stream, small_spec):
    job = small_job(seed=2)
    plain, _ = run_update(None, small_stream, 0, job, tmp_path / "plain", model_spec=small_spec)
    res = run_hpo(None, small_stream, 0, job, ConfigSpace({"learning_rate": 0.05}), tmp_path / "hpo", model_spec=small_spec, max_trials=1)
    assert res.state.params.tobytes() == plain.params.tobytes()
    assert res.state.metric_rows() == plain.metric_rows()


def test_hpo_update_chain_and_input_state_untouched(tmp_path, small_stream, small_spec):
    from test_updater import tree

    job = small_job(seed=0)
    space = ConfigSpace({"learning_rate": Choice((0.02, 0.1)), "er_weight": Choice((1.0, 2.0))})
    run_update(None, small_stream, 0, job, tmp_path / "S", model_spec=small_spec)
    before = tree(tmp_path / "S")
    res = run_hpo(tmp_path / "S", small_stream, 1, job, space, tmp_path / "T", max_trials=4, backend=LocalBackend(2))
    assert tree(tmp_path / "S") == before
    state = load_state(tmp_path / "T")
    assert state.update_counter == 2
    values = [float(r["metric_value"]) for r in rows(res.summary_csv)]
    assert res.best_trial.best("max") == max(values)
    assert rows(state.hpo_history_csv)[0]["update_counter"] == "2"
    assert (tmp_path / "T" / "hpo_summary.csv").read_text() == res.summary_csv


def test_run_hpo_rejects_untunable_name(tmp_path, small_stream, small_spec):
    with pytest.raises(KeyError):
        run_hpo(None, small_stream, 0, small_job(), ConfigSpace({"dropout": 0.1}), tmp_path / "S", model_spec=small_spec, max_trials=1)
