import csv
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trajmoe import evaluation as ev
from trajmoe import model, training
from trajmoe.config import ABLATIONS, ConfigError, TrainConfig
from trajmoe.evaluation import ExperimentConfig
from trajmoe.features import Trajectory

from helpers import tiny_model


def brute_acc(ranked, truths, k):
    hits = 0
    for row, t in zip(ranked, truths):
        hits += any(row[j] == t for j in range(k))
    return hits / len(truths)


def test_acc_at_k_examples():
    ranked = np.array([[3, 1, 4], [1, 5, 9], [2, 6, 5]])
    truths = np.array([1, 2, 2])
    assert ev.acc_at_k(ranked, truths, 1) == pytest.approx(1 / 3)
    assert ev.acc_at_k(ranked, truths, 2) == pytest.approx(2 / 3)
    assert ev.acc_at_k(ranked, np.array([3, 1, 2]), 1) == 1.0
    assert ev.acc_at_k(ranked, np.array([7, 7, 7]), 3) == 0.0


def test_acc_at_k_errors():
    with pytest.raises(ValueError):
        ev.acc_at_k(np.zeros((0, 3), dtype=int), np.zeros(0, dtype=int), 1)
    with pytest.raises(ValueError):
        ev.acc_at_k(np.zeros((2, 3), dtype=int), np.zeros(2, dtype=int), 0)
    with pytest.raises(ValueError):
        ev.acc_at_k(np.zeros((2, 3), dtype=int), np.zeros(2, dtype=int), 4)


@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_acc_at_k_matches_membership_oracle(m, n, seed):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 4, size=(m, n)).astype(float)  # many ties
    truths = rng.integers(0, n, size=m)
    for k in range(1, min(n, 5) + 1):
        ranked = ev.rank_candidates(scores, k)
        assert ev.acc_at_k(ranked, truths, k) == brute_acc(ranked, truths, k)
        # ranking oracle: descending by score, lower id first on ties
        order = sorted(range(n), key=lambda j: (-scores[0, j], j))[:k]
        assert ranked[0].tolist() == order


def test_accuracies_monotone_in_k(rng):
    scores = rng.normal(size=(200, 10))
    acc = ev.accuracies(scores, rng.integers(0, 10, size=200), ks=(1, 3, 5))
    assert acc[1] <= acc[3] <= acc[5]


def _tr(locs, hour0=8, user=0, gap_h=1):
    times = 1704067200 + hour0 * 3600 + np.arange(len(locs)) * gap_h * 3600
    return Trajectory(0, user, locs, times)


def test_markov_prefers_majority_successor():
    train = [_tr([0, 1, 0, 1]), _tr([0, 1, 2]), _tr([0, 2, 0])]  # 0->1 three times, 0->2 once
    m = ev.MarkovBaseline(3).fit(train)
    scores, truths = m.scores([_tr([0, 1])])
    assert np.argmax(scores[0]) == 1
    assert np.allclose(scores[0], np.array([1, 4, 2]) / 7)
    assert ev.markov_baseline(train, [_tr([0, 1])], num_locations=3) == 1.0


def test_markov_two_to_one_majority():
    a_b, a_c = _tr([0, 1]), _tr([0, 2])
    assert ev.markov_baseline([a_b, a_b, a_c], [_tr([0, 1])], num_locations=3) == 1.0
    assert ev.markov_baseline([a_b, a_b, a_c], [_tr([0, 2])], num_locations=3) == 0.0


def test_markov_unseen_state_falls_back_to_frequency():
    train = [_tr([0, 1, 0, 1]), _tr([0, 2])]
    m = ev.MarkovBaseline(4).fit(train)
    scores, _ = m.scores([_tr([3, 1])])
    assert np.allclose(scores[0], np.array([1, 2, 1, 0]) / 4)


def test_markov_time_conditioned_states_split_by_half_day():
    morning = _tr([0, 1, 0, 1], hour0=6)
    evening = _tr([0, 2, 0, 2], hour0=18)
    assert ev.markov_baseline([morning, evening], [morning, evening], num_locations=3,
                              time_conditioned=True) == 1.0
    assert ev.markov_baseline([morning, evening], [morning, evening], num_locations=3) < 1.0


def test_markov_needs_training_data():
    with pytest.raises(ValueError):
        ev.markov_baseline([], [_tr([0, 1])])


def _forced_ckpt(cfg):
    ck = training.init_checkpoint(cfg)
    for i in range(cfg.model.layers):
        ck.params[f"layer{i}.gate.traj.w"][:] = 0
        ck.params[f"layer{i}.gate.traj.b"][:] = [50.0, 0.0, 0.0]
        ck.params[f"layer{i}.gate.router.w"][:] = 0
        ck.params[f"layer{i}.gate.router.b"][:] = [1.0, 0.0]
    return ck


def test_forced_poi_route_gives_full_poi_share(small_data):
    cfg = TrainConfig(T=16, model=tiny_model(layers=2, poi_categories=8))
    stats = ev.gate_stats(_forced_ckpt(cfg), small_data[0])
    for slot, count, share in stats.slot_rows():
        assert share.tolist() == [1.0, 0.0, 0.0]
    assert stats.slot_counts.sum() == sum(len(t) for t in small_data[0].test)


def test_gate_stats_recount_oracle(small_data):
    cfg = TrainConfig(T=16, model=tiny_model(layers=2, poi_categories=8))
    ck = training.init_checkpoint(cfg)
    _, trace = ev.evaluate(ck, small_data[0], trace=True)
    for source in ("W", "w_time"):
        for layer in (0, 1):
            st_ = ev.gate_stats_from_trace(trace, source, layer)
            w = getattr(trace.layers[layer], source)
            for slot in range(48):
                idx = [i for i in range(len(trace.tod)) if trace.tod[i] == slot]
                assert st_.slot_counts[slot] == len(idx)
                for j in range(3):
                    n = sum(1 for i in idx if int(np.argmax(w[i])) == j)
                    assert st_.slot_shares[slot, j] == (n / len(idx) if idx else 0.0)
    with pytest.raises(ValueError):
        ev.gate_stats_from_trace(trace, "g")


def test_gate_stats_export_and_summaries(small_data, tmp_path):
    cfg = TrainConfig(T=16, model=tiny_model(layers=2, poi_categories=8))
    stats = ev.gate_stats(training.init_checkpoint(cfg), small_data[1])
    slots, layers = ev.write_gate_stats(stats, tmp_path)
    rows = list(csv.DictReader(open(slots)))
    assert rows and all(abs(float(r["poi"]) + float(r["pos"]) + float(r["pop"]) - 1) < 1e-9 for r in rows)
    lrows = list(csv.DictReader(open(layers)))
    assert sorted({(r["layer"], r["component"]) for r in lrows}) == [
        (str(i), c) for i in range(2) for c in ("poi", "pop", "pos")]
    for r in lrows:
        assert float(r["q25"]) <= float(r["median"]) <= float(r["q75"])


def test_gate_stats_need_a_router(small_data):
    cfg = TrainConfig(T=16, model=tiny_model(poi_categories=8).with_variant("remove_moe_keep_fused"))
    with pytest.raises(ValueError):
        ev.gate_stats(training.init_checkpoint(cfg), small_data[0])


def test_evaluate_is_deterministic_and_side_effect_free(small_data):
    cfg = TrainConfig(T=16, model=tiny_model(poi_categories=8))
    ck = training.init_checkpoint(cfg)
    before = {k: v.copy() for k, v in ck.params.items()}
    test_before = list(small_data[0].test)
    a, _ = ev.evaluate(ck, small_data[0])
    b, _ = ev.evaluate(ck, small_data[0])
    assert a.acc == b.acc and a.samples == b.samples
    assert all(np.array_equal(before[k], ck.params[k]) for k in before)
    assert small_data[0].test == test_before
    assert a.samples == sum(len(t) - 1 for t in small_data[0].test)
    last, _ = ev.evaluate(ck, small_data[0], positions="last")
    assert last.samples == len(small_data[0].test)


def test_evaluate_matches_independent_scoring(small_data):
    cfg = TrainConfig(T=16, model=tiny_model(poi_categories=8))
    ck = training.init_checkpoint(cfg)
    ds = small_data[0]
    rep, _ = ev.evaluate(ck, ds, ks=(1, 3))
    hits1 = hits3 = n = 0
    from trajmoe import core
    from trajmoe.features import pad_batch

    for tr in ds.test:
        logits, _ = training.batch_logits(core.constants(ck.params), pad_batch([tr], ds.city, 16), ds.city, cfg)
        for t in range(len(tr) - 1):
            row = logits.data[0, t]
            order = sorted(range(len(row)), key=lambda j: (-row[j], j))
            hits1 += order[0] == tr.locations[t + 1]
            hits3 += tr.locations[t + 1] in order[:3]
            n += 1
    assert rep.acc[1] == hits1 / n and rep.acc[3] == hits3 / n


def test_reports_round_trip(tmp_path):
    r = ev.EvalReport(2, "test", {1: 0.25, 3: 0.5, 5: 0.75}, 40, 8, "abc", cell="c", wall_clock=1.5)
    path = ev.write_reports([r], tmp_path / "r.csv")
    row = ev.read_reports(path)[0]
    assert row["acc@3"] == "0.5" and row["samples"] == "40" and "wall_clock" not in row
    assert open(path).readline().strip() == ",".join(ev.REPORT_FIELDS)


def test_fingerprint_tracks_config():
    a = TrainConfig(T=16)
    assert ev.config_fingerprint(a) == ev.config_fingerprint(TrainConfig(T=16))
    assert ev.config_fingerprint(a) != ev.config_fingerprint(TrainConfig(T=16, seed=1))


@pytest.mark.parametrize("variant", ABLATIONS)
def test_ablation_param_delta_matches_count(variant):
    cfg = tiny_model(layers=2, poi_categories=8)
    assert ev.param_count(cfg) - ev.param_count(cfg.with_variant(variant)) == ev.ablation_param_delta(cfg, variant)
    assert ev.param_count(cfg) == model.expected_param_count(cfg)


def test_unknown_variant_is_rejected():
    with pytest.raises(ConfigError):
        ev.apply_ablation(tiny_model(), "remove_everything")


def test_each_variant_trains_and_evaluates(small_data, small_train_cfg):
    for v in ABLATIONS:
        cfg = ev.apply_ablation(small_train_cfg, v)
        ck = training.pretrain(small_data[:1], cfg, max_steps=2)
        rep, _ = ev.evaluate(ck, small_data[0])
        assert rep.variant == v and 0.0 <= rep.acc[1] <= 1.0


def test_fewshot_grid_accounting(small_data, small_train_cfg, tmp_path):
    exp = ExperimentConfig("fewshot", train=small_train_cfg, fractions=(0.1, 0.25, 0.5, 1.0))
    reports = ev.run_experiment(exp, small_data, tmp_path)
    assert [r.cell for r in reports] == ["fraction_0.1", "fraction_0.25", "fraction_0.5", "fraction_1"]
    counts = [r.finetune_trajectories for r in reports]
    assert counts == sorted(counts) and counts[-1] == len(small_data[1].train)
    assert all(r.city_id == 1 for r in reports)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["kind"] == "fewshot" and set(summary["cells"]) == {r.cell for r in reports}
    assert (tmp_path / "pretrained.zip").exists() and (tmp_path / "fraction_1" / "checkpoint.zip").exists()


def test_experiment_checks_cities_before_training(small_data, small_train_cfg, tmp_path):
    exp = ExperimentConfig("fewshot", train=small_train_cfg, target_city=5)
    with pytest.raises(FileNotFoundError):
        ev.run_experiment(exp, small_data, tmp_path)
    assert not any(tmp_path.iterdir())
    with pytest.raises(ValueError):
        ev.plan_cells(ExperimentConfig("fewshot", train=small_train_cfg, fractions=(1e-6,)), small_data)
    with pytest.raises(ConfigError):
        ExperimentConfig("sweep")


def test_experiment_config_round_trip(small_train_cfg):
    exp = ExperimentConfig("scaling", train=small_train_cfg, volumes=(0.0, 0.5), pretrain_cities=(0,))
    assert ExperimentConfig.from_dict(json.loads(json.dumps(exp.to_dict()))) == exp


def test_parallel_cells_match_sequential(small_data, small_train_cfg):
    exp = ExperimentConfig("scaling", train=small_train_cfg, volumes=(0.0, 1.0), finetune_fraction=0.5)
    seq = ev.run_experiment(exp, small_data)
    par = ev.run_experiment(exp, small_data, jobs=2)
    assert [(r.cell, r.acc) for r in seq] == [(r.cell, r.acc) for r in par]


def test_category_mismatch_is_a_config_error(small_data):
    with pytest.raises(ConfigError):
        ev.evaluate(training.init_checkpoint(TrainConfig(T=16, model=tiny_model())), small_data[0])
