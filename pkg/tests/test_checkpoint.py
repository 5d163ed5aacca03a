import numpy as np
import pytest

from tie.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from tie.data import build_vocab
from tie.instructions import InstructionPool, parse_template
from tie.model import ModelConfig, Parameters
from tie.synth import make_synth
from tie import trainer as T
from tie.trainer import TrainConfig, TrainState, rng_for


def fixture(size=12, seed=4):
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
    return [ds for ds, _ in datasets], vocab, pool, params, cfg, k


def run_pretrain(steps, tmp_path, resume_at=None):
    (a, b, _t), vocab, pool, params, cfg, k = fixture()
    tcfg = TrainConfig(batch_size=4, pretrain_epochs=10, pretrain_max_steps=steps)
    state = TrainState.fresh(params, tcfg.lr)
    if resume_at is not None:
        first = TrainConfig(batch_size=4, pretrain_epochs=10, pretrain_max_steps=resume_at)
        T.pretrain(state, [a, b], pool, vocab, first, seed=4, eval_dev=False)
        path = tmp_path / "mid.ckpt"
        save_checkpoint(path, Checkpoint(config=cfg, num_channels=k, seed=4,
                                         step=state.step, vocab=vocab, state=state))
        loaded = load_checkpoint(path)
        state = loaded.state
        assert state.step == resume_at
    T.pretrain(state, [a, b], pool, vocab, tcfg, seed=4, eval_dev=False)
    return state


def test_roundtrip_preserves_everything(tmp_path):
    (a, b, _t), vocab, pool, params, cfg, k = fixture()
    tcfg = TrainConfig(batch_size=4, pretrain_epochs=1)
    state = TrainState.fresh(params, tcfg.lr)
    T.pretrain(state, [a, b], pool, vocab, tcfg, seed=4, eval_dev=False)

    path = tmp_path / "x.ckpt"
    ckpt = Checkpoint(config=cfg, num_channels=k, seed=4, step=state.step,
                      vocab=vocab, state=state)
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)

    assert loaded.config == cfg
    assert loaded.num_channels == k
    assert loaded.step == state.step
    assert loaded.vocab.id_to_token == vocab.id_to_token
    for name, t in state.params.tensors.items():
        assert np.array_equal(loaded.state.params.tensors[name].data, t.data)
        assert np.array_equal(loaded.state.optimizer.m[name], state.optimizer.m[name])
        assert np.array_equal(loaded.state.optimizer.v[name], state.optimizer.v[name])
    assert loaded.state.optimizer.t == state.optimizer.t
    assert set(loaded.state.snapshot.prev) == set(state.snapshot.prev)
    for g, arr in state.snapshot.prev.items():
        assert np.array_equal(loaded.state.snapshot.prev[g], arr)


def test_save_load_save_is_byte_identical(tmp_path):
    (a, b, _t), vocab, pool, params, cfg, k = fixture()
    tcfg = TrainConfig(batch_size=4, pretrain_epochs=1)
    state = TrainState.fresh(params, tcfg.lr)
    T.pretrain(state, [a, b], pool, vocab, tcfg, seed=4, eval_dev=False)

    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ckpt = Checkpoint(config=cfg, num_channels=k, seed=4, step=state.step,
                      vocab=vocab, state=state)
    save_checkpoint(p1, ckpt)
    loaded = load_checkpoint(p1)
    save_checkpoint(p2, Checkpoint(config=loaded.config, num_channels=loaded.num_channels,
                                   seed=loaded.seed, step=loaded.step,
                                   vocab=loaded.vocab, state=loaded.state))
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    direct = run_pretrain(51, tmp_path)
    resumed = run_pretrain(51, tmp_path, resume_at=50)
    assert direct.step == resumed.step == 51
    for name, t in direct.params.tensors.items():
        assert np.array_equal(t.data, resumed.params.tensors[name].data), name
    for name in direct.optimizer.m:
        assert np.array_equal(direct.optimizer.m[name], resumed.optimizer.m[name])
    assert direct.optimizer.t == resumed.optimizer.t


def test_crc_mismatch_detected(tmp_path):
    (a, b, _t), vocab, pool, params, cfg, k = fixture()
    state = TrainState.fresh(params, 1e-3)
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, Checkpoint(config=cfg, num_channels=k, seed=0, step=0,
                                     vocab=vocab, state=state))
    raw = bytearray(path.read_bytes())
    raw[-20] ^= 0xFF  # flip a payload byte
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)
