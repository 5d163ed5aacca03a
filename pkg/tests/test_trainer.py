import numpy as np
import pytest

from tie.autodiff import Tensor
from tie.data import build_vocab
from tie.instructions import InstructionPool, parse_template
from tie.model import ModelConfig, Parameters
from tie.synth import make_synth
from tie import trainer as T
from tie.trainer import (
    Adam,
    GradientSnapshot,
    TrainConfig,
    TrainState,
    TrainingDiverged,
    gated_step,
    plan_epoch,
    rng_for,
)


# --- loss ---------------------------------------------------------------


def test_loss_saturated_zero():
    logits = Tensor(np.full((3, 3, 2), -30.0))
    gold = np.zeros((3, 3, 2))
    assert T.loss(logits, gold).item() < 1e-9


def test_loss_zero_logits_ln2():
    logits = Tensor(np.zeros((3, 3, 2)))
    gold = (np.random.default_rng(0).random((3, 3, 2)) < 0.5).astype(float)
    assert T.loss(logits, gold).item() == pytest.approx(np.log(2.0), abs=1e-12)


def test_loss_matches_formula():
    rng = np.random.default_rng(1)
    z = rng.normal(scale=2.0, size=(4, 4, 3))
    g = (rng.random((4, 4, 3)) < 0.3).astype(float)
    s = 1.0 / (1.0 + np.exp(-z))
    direct = -(g * np.log(s) + (1 - g) * np.log(1 - s)).mean()
    assert T.loss(Tensor(z), g).item() == pytest.approx(direct, abs=1e-10)


# --- epoch planning -----------------------------------------------------


def test_plan_two_by_two_alternates():
    plan = plan_epoch({"a": 4, "b": 4}, 2, rng_for(0, "plan", 0))
    assert len(plan.batches) == 4
    ids = [d for d, _ in plan.batches]
    assert ids.count("a") == 2 and ids.count("b") == 2
    assert all(ids[i] != ids[i + 1] for i in range(3))
    assert plan.forced_adjacent == []


def test_plan_requires_two_datasets_for_interleave():
    with pytest.raises(ValueError):
        plan_epoch({"a": 4}, 2, rng_for(0, "plan", 0))


def test_plan_finetune_mode_single_dataset():
    plan = plan_epoch({"a": 7}, 3, rng_for(1, "plan", 0), interleave=False)
    assert [d for d, _ in plan.batches] == ["a", "a", "a"]
    covered = sorted(i for _, b in plan.batches for i in b)
    assert covered == list(range(7))
    assert [len(b) for _, b in plan.batches] == [3, 3, 1]


def test_plan_fuzz_eleven_sources():
    rng = np.random.default_rng(2)
    for trial in range(100):
        sizes = {f"d{i}": int(rng.integers(5, 60)) for i in range(11)}
        plan = plan_epoch(sizes, 8, rng_for(3, "plan", trial))
        seen = {d: [] for d in sizes}
        for ds_id, batch in plan.batches:
            assert 1 <= len(batch) <= 8
            seen[ds_id].extend(batch)
        for ds_id, n in sizes.items():
            assert sorted(seen[ds_id]) == list(range(n))
        forced = set(plan.forced_adjacent)
        for i in range(1, len(plan.batches)):
            if plan.batches[i][0] == plan.batches[i - 1][0]:
                assert i in forced
    # with 11 balanced sources, forced tails should be rare
    plan = plan_epoch({f"d{i}": 40 for i in range(11)}, 8, rng_for(4, "plan", 0))
    assert plan.forced_adjacent == []


def test_plan_tail_violation_recorded_not_dropped():
    # one dataset holds far more batches than the rest combined
    plan = plan_epoch({"big": 40, "small": 4}, 4, rng_for(5, "plan", 0))
    assert len(plan.batches) == 11
    assert plan.forced_adjacent  # unavoidable adjacency at the tail
    covered = sorted(i for d, b in plan.batches if d == "big" for i in b)
    assert covered == list(range(40))


def test_plan_deterministic_per_seed():
    p1 = plan_epoch({"a": 20, "b": 30}, 4, rng_for(6, "plan", 0))
    p2 = plan_epoch({"a": 20, "b": 30}, 4, rng_for(6, "plan", 0))
    assert p1.batches == p2.batches


# --- gate ---------------------------------------------------------------


def tiny_params(k=2, seed=0):
    cfg = ModelConfig(d=4, layers_enc=1, layers_dec=1, heads=2, max_len=6,
                      max_instr_len=6, vocab_size=8)
    return Parameters(cfg, k, np.random.default_rng(seed))


def ones_grads(params, sign=1.0):
    return {n: sign * np.ones_like(t.data) for n, t in params.tensors.items()}


def test_gate_first_step_always_updates():
    p = tiny_params()
    snap = GradientSnapshot()
    adam = Adam(p, lr=1e-3)
    decisions = gated_step(p, snap, ones_grads(p), adam)
    assert all(d["updated"] and d["dot"] is None for d in decisions.values())
    assert set(snap.prev) == set(p.groups)


def test_gate_equal_gradients_update_all():
    p = tiny_params()
    snap, adam = GradientSnapshot(), Adam(p, lr=1e-3)
    gated_step(p, snap, ones_grads(p), adam)
    decisions = gated_step(p, snap, ones_grads(p), adam)
    for group, d in decisions.items():
        assert d["updated"] and d["dot"] > 0


def test_gate_negated_gradients_freeze_all():
    p = tiny_params()
    snap, adam = GradientSnapshot(), Adam(p, lr=1e-3)
    gated_step(p, snap, ones_grads(p), adam)
    before = p.copy_values()
    m_before = {n: a.copy() for n, a in adam.m.items()}
    v_before = {n: a.copy() for n, a in adam.v.items()}
    t_before = dict(adam.t)
    decisions = gated_step(p, snap, ones_grads(p, sign=-1.0), adam)
    for d in decisions.values():
        assert not d["updated"] and d["dot"] < 0
    # frozen means bit-identical parameters and optimizer state
    for name, t in p.tensors.items():
        assert np.array_equal(t.data, before[name])
        assert np.array_equal(adam.m[name], m_before[name])
        assert np.array_equal(adam.v[name], v_before[name])
    assert adam.t == t_before
    # but the snapshot still stores the new gradients
    assert all(np.all(a == -1.0) for a in snap.prev.values())


def test_gate_mixed_groups():
    p = tiny_params()
    snap, adam = GradientSnapshot(), Adam(p, lr=1e-3)
    g0 = ones_grads(p)
    gated_step(p, snap, g0, adam)
    g1 = ones_grads(p)
    for name in p.groups["embed"]:
        g1[name] = -g1[name]
    before = p.copy_values()
    decisions = gated_step(p, snap, g1, adam)
    assert not decisions["embed"]["updated"] and decisions["embed"]["dot"] < 0
    assert decisions["score"]["updated"] and decisions["score"]["dot"] > 0
    for name in p.groups["embed"]:
        assert np.array_equal(p.tensors[name].data, before[name])
    assert not np.array_equal(p.tensors["score.w"].data, before["score.w"])


def test_gate_zero_previous_gradient_skips():
    p = tiny_params()
    snap, adam = GradientSnapshot(), Adam(p, lr=1e-3)
    gated_step(p, snap, {n: np.zeros_like(t.data) for n, t in p.tensors.items()}, adam)
    decisions = gated_step(p, snap, ones_grads(p), adam)
    for d in decisions.values():
        assert d["dot"] == 0.0 and not d["updated"]


def test_gate_global_granularity():
    p = tiny_params()
    snap, adam = GradientSnapshot(), Adam(p, lr=1e-3)
    g0 = ones_grads(p)
    gated_step(p, snap, g0, adam, granularity="global")
    # embed dominates the global dot; flip everything else
    g1 = {n: -a for n, a in ones_grads(p).items()}
    for name in p.groups["embed"]:
        g1[name] = np.ones_like(g1[name])
    sizes = {g: sum(p.tensors[n].size for n in names) for g, names in p.groups.items()}
    embed_size = sizes["embed"]
    rest = sum(s for g, s in sizes.items() if g != "embed")
    expected = embed_size - rest > 0
    decisions = gated_step(p, snap, g1, adam, granularity="global")
    dots = {d["dot"] for d in decisions.values()}
    assert len(dots) == 1  # one global decision
    assert all(d["updated"] == expected for d in decisions.values())


def test_gate_off_updates_without_dots():
    p = tiny_params()
    snap, adam = GradientSnapshot(), Adam(p, lr=1e-3)
    gated_step(p, snap, ones_grads(p), adam, gate=False)
    decisions = gated_step(p, snap, ones_grads(p, sign=-1.0), adam, gate=False)
    assert all(d["updated"] and d["dot"] is None for d in decisions.values())


def test_gate_nan_gradient_aborts():
    p = tiny_params()
    snap, adam = GradientSnapshot(), Adam(p, lr=1e-3)
    bad = ones_grads(p)
    bad["score.w"][0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="score.w"):
        gated_step(p, snap, bad, adam)


# --- end-to-end training ------------------------------------------------


def small_run(size=12, seed=3):
    datasets = make_synth("aligned_pair", size, seed)
    templates = [t for _, ts in datasets for t in ts]
    vocab = build_vocab([ds for ds, _ in datasets], extra_texts=templates)
    pool = InstructionPool()
    for ds, ts in datasets:
        for t in ts:
            pool.add(parse_template(t, ds.label_space, vocab, dataset_id=ds.id))
    cfg = ModelConfig(d=8, layers_enc=1, layers_dec=1, heads=2, max_len=16,
                      max_instr_len=24, vocab_size=len(vocab))
    k = datasets[0][0].label_space.num_channels
    params = Parameters(cfg, k, rng_for(seed, "init"))
    return [ds for ds, _ in datasets], vocab, pool, params


def test_pretrain_runs_and_reports():
    (a, b, target), vocab, pool, params = small_run()
    cfg = TrainConfig(batch_size=4, pretrain_epochs=1)
    state = TrainState.fresh(params, cfg.lr)
    result = T.pretrain(state, [a, b], pool, vocab, cfg, seed=3)
    assert state.step == 6  # 2 datasets * ceil(12/4)
    assert len(result.step_reports) == 6
    assert result.step_reports[0].gated
    assert {m["dataset"] for m in result.epoch_metrics} == {a.id, b.id}
    assert all(set(r.decisions) == set(params.groups) for r in result.step_reports)


def test_pretrain_requires_two_sources():
    (a, _b, _t), vocab, pool, params = small_run()
    cfg = TrainConfig(batch_size=4)
    with pytest.raises(ValueError):
        T.pretrain(TrainState.fresh(params, cfg.lr), [a], pool, vocab, cfg, seed=0)


def test_training_deterministic_per_seed():
    runs = []
    for _ in range(2):
        (a, b, _t), vocab, pool, params = small_run()
        cfg = TrainConfig(batch_size=4, pretrain_epochs=1)
        state = TrainState.fresh(params, cfg.lr)
        result = T.pretrain(state, [a, b], pool, vocab, cfg, seed=3, eval_dev=False)
        runs.append((state.params.copy_values(),
                     [(r.dataset_id, r.loss_value) for r in result.step_reports]))
    v1, r1 = runs[0]
    v2, r2 = runs[1]
    assert r1 == r2
    for name in v1:
        assert np.array_equal(v1[name], v2[name])


def test_fixed_batch_loss_decreases_with_gate_off():
    (a, _b, _t), vocab, pool, params = small_run(size=4)
    cfg = TrainConfig(batch_size=4, finetune_epochs=20, lr=1e-3)
    state = TrainState.fresh(params, cfg.lr)
    result = T.finetune(state, a, pool, vocab, cfg, seed=5, eval_dev=False)
    losses = [r.loss_value for r in result.step_reports[:20]]
    assert len(losses) == 20
    non_monotone = sum(1 for i in range(1, 20) if losses[i] > losses[i - 1] + 1e-12)
    assert non_monotone <= 2
    assert losses[-1] < losses[0]


def test_finetune_keeps_best_dev_params():
    (a, _b, target), vocab, pool, params = small_run(size=8)
    cfg = TrainConfig(batch_size=4, finetune_epochs=3)
    state = TrainState.fresh(params, cfg.lr)
    result = T.finetune(state, target, pool, vocab, cfg, seed=7)
    assert result.best_dev_f1 is not None
    best = max(m["dev_f1"] for m in result.epoch_metrics)
    assert result.best_dev_f1 == pytest.approx(best)


def test_skip_rate_helper():
    reports = [
        T.StepReport(0, "a", 1.0, True, {"g1": {"dot": None, "updated": True}}),
        T.StepReport(1, "a", 1.0, True, {"g1": {"dot": -1.0, "updated": False}}),
        T.StepReport(2, "a", 1.0, True, {"g1": {"dot": 2.0, "updated": True}}),
    ]
    assert T.skip_rate(reports) == pytest.approx(0.5)
