import numpy as np
import pytest

from bllm.captions import QASample
from bllm.errors import ContractError, DataError, TrainAbort
from bllm.model import Model, ModelConfig
from bllm.tensor import Rng
from bllm.training import (PAPER_MAX_LR, TOY_MAX_LR, TrainConfig, VisualCache,
                           encode_samples, exact_match, load_model,
                           save_model, token_accuracy, train_stage,
                           trainable_params)
from bllm.vocab import EOS, build_vocab

CFG = ModelConfig(d=32, d_bev=16, patch=56, enc_layers=1, enc_heads=2,
                  dec_layers=1, dec_heads=2, vocab_size=64, max_seq=48,
                  lora_rank=2, lora_alpha=4.0, image_size=224)


def corpus():
    samples = [
        QASample("f0", "LAN", "How many lanes are there?", "two lanes here", "2"),
        QASample("f1", "LAN", "How many lanes are there?", "three lanes here", "3"),
        QASample("f0", "QLT", "What is the point cloud data quality?",
                 "two lanes here", "good"),
        QASample("f1", "QLT", "What is the point cloud data quality?",
                 "three lanes here", "degraded"),
    ]
    vocab = build_vocab([s.question for s in samples]
                        + [s.annotation for s in samples]
                        + [s.gold for s in samples])
    rng = Rng(77)
    images = {f: rng.fork(f).uniform(0, 255, size=(224, 224, 3)).astype(np.uint8)
              for f in ("f0", "f1")}
    return samples, vocab, images


def test_train_config_defaults():
    assert TrainConfig(stage=1).epochs == 20
    assert TrainConfig(stage=2).epochs == 10
    assert TrainConfig(stage=1).max_lr == TOY_MAX_LR == 1e-3
    assert TrainConfig(stage=1, fidelity="paper").max_lr == PAPER_MAX_LR == 1e-5
    with pytest.raises(ContractError):
        TrainConfig(stage=3)
    with pytest.raises(ContractError):
        TrainConfig(stage=1, fidelity="half")


def test_encode_samples_terminal_eos():
    samples, vocab, _ = corpus()
    encoded = encode_samples(samples, vocab)
    for e in encoded:
        assert e.ans_ids[-1] == EOS
        assert vocab.decode(e.ans_ids) == e.gold
        assert e.q_ids == vocab.encode(
            {"LAN": "How many lanes are there?",
             "QLT": "What is the point cloud data quality?"}[e.category])


def test_trainable_params_selection():
    model = Model.build(CFG, seed=1)
    params = trainable_params(model)
    assert sorted(params) == ["dec.0.attn.lora_q.a", "dec.0.attn.lora_q.b",
                              "dec.0.attn.lora_v.a", "dec.0.attn.lora_v.b",
                              "proj.b", "proj.w"]


def test_visual_cache_reuse_and_bypass():
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=2)
    cache = VisualCache(model, images)
    a = cache.grouped("f0")
    assert cache.grouped("f0") is a
    assert not a.mat.a.flags.writeable
    with pytest.raises(DataError):
        cache.grouped("missing")
    hot = Model.build(ModelConfig(**{**CFG.to_dict(),
                                     "train_embeddings": True}), seed=2)
    hot_cache = VisualCache(hot, images)
    assert hot_cache.grouped("f0") is not hot_cache.grouped("f0")


def test_train_reduces_loss_and_keeps_backbone_frozen():
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=3)
    cfg = TrainConfig(stage=1, epochs=10, batch_size=2, seed=3)
    report = train_stage(model, samples, images, vocab, cfg)
    assert report.steps == 10 * 2
    assert len(report.loss_trace) == report.steps
    assert report.loss_trace[-1] < report.loss_trace[0]
    assert report.digest_before == report.digest_after
    assert report.to_dict()["frozen_unchanged"] is True
    assert len(report.epoch_token_acc) == 10
    acc = report.epoch_token_acc[-1]
    assert 0.0 <= acc <= 1.0


def test_same_seed_identical_traces():
    samples, vocab, images = corpus()
    traces = []
    for _ in range(2):
        model = Model.build(CFG, seed=4)
        cfg = TrainConfig(stage=1, epochs=3, batch_size=2, seed=9)
        traces.append(train_stage(model, samples, images, vocab,
                                  cfg).loss_trace)
    assert traces[0] == traces[1]
    other = train_stage(Model.build(CFG, seed=4), samples, images, vocab,
                        TrainConfig(stage=1, epochs=3, batch_size=2,
                                    seed=10)).loss_trace
    assert other != traces[0]


def test_zero_steps_leaves_model_untouched(tmp_path):
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=5)
    before = {n: p.a.copy() for n, p in model.params.items()}
    report = train_stage(model, samples, images, vocab,
                         TrainConfig(stage=1, epochs=0),
                         out_path=tmp_path / "zero.bllm")
    assert report.steps == 0 and report.loss_trace == []
    for n, p in model.params.items():
        assert np.array_equal(p.a, before[n]), n
    assert (tmp_path / "zero.bllm").is_file()


def test_non_finite_loss_aborts_with_step():
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=6)
    model.params["proj.w"].a[0, 0] = np.nan
    with pytest.raises(TrainAbort) as ei:
        train_stage(model, samples, images, vocab,
                    TrainConfig(stage=1, epochs=1, batch_size=2))
    assert ei.value.step == 1


def test_stage_two_requires_stage_one():
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=7)
    with pytest.raises(ContractError):
        train_stage(model, samples, images, vocab, TrainConfig(stage=2))
    with pytest.raises(ContractError):
        train_stage(model, [], images, vocab, TrainConfig(stage=1))


def test_save_load_round_trip(tmp_path):
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=8)
    cfg = TrainConfig(stage=1, epochs=2, batch_size=2, seed=8)
    path = tmp_path / "m.bllm"
    train_stage(model, samples, images, vocab, cfg, out_path=path)

    loaded, vocab2, stages, optim = load_model(path)
    assert stages == (1,)
    assert vocab2.tokens == vocab.tokens
    assert loaded.cfg == CFG
    assert optim is not None and optim.step == 4
    for n, p in model.params.items():
        assert np.array_equal(p.a, loaded.params[n].a), n

    # reloaded model generates identically
    enc = encode_samples(samples, vocab)[0]
    cache_a = VisualCache(model, images)
    cache_b = VisualCache(loaded, images)
    assert (model.generate(cache_a.grouped("f0"), enc.ann_ids, enc.q_ids)
            == loaded.generate(cache_b.grouped("f0"), enc.ann_ids, enc.q_ids))

    # saving the loaded model reproduces the file byte-for-byte
    again = tmp_path / "again.bllm"
    save_model(again, loaded, vocab2, stages_done=stages, optim=optim)
    assert again.read_bytes() == path.read_bytes()


def test_resumed_training_continues_schedule(tmp_path):
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=11)
    path = tmp_path / "r.bllm"
    train_stage(model, samples, images, vocab,
                TrainConfig(stage=1, epochs=1, batch_size=2, seed=11),
                out_path=path)
    loaded, vocab2, stages, optim = load_model(path)
    report = train_stage(loaded, samples, images, vocab2,
                         TrainConfig(stage=2, epochs=1, batch_size=2,
                                     seed=11),
                         stages_done=stages, out_path=path)
    assert report.stage == 2 and report.steps == 2
    _, _, stages2, _ = load_model(path)
    assert stages2 == (1, 2)


def test_load_model_rejects_corrupt_shapes(tmp_path):
    from bllm.checkpoint import load_checkpoint, save_checkpoint

    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=12)
    path = tmp_path / "ok.bllm"
    save_model(path, model, vocab)
    mats, meta = load_checkpoint(path)
    mats["proj.w"] = mats["proj.b"]  # wrong shape for proj.w
    bad = tmp_path / "bad.bllm"
    save_checkpoint(bad, mats, meta)
    with pytest.raises(DataError) as ei:
        load_model(bad)
    assert "proj.w" in str(ei.value)


def test_accuracy_helpers_bounded():
    samples, vocab, images = corpus()
    model = Model.build(CFG, seed=13)
    encoded = encode_samples(samples, vocab)
    cache = VisualCache(model, images)
    assert 0.0 <= token_accuracy(model, encoded, cache) <= 1.0
    assert 0.0 <= exact_match(model, encoded, cache, vocab) <= 1.0
    assert token_accuracy(model, [], cache) == 0.0
    assert exact_match(model, [], cache, vocab) == 0.0
