import copy

import numpy as np
import pytest
import torch

from clipreid.data import SyntheticSpec, generate_synthetic, load_dataset
from clipreid.data.synthetic import Identity
from clipreid.errors import ConfigError, ContractError, FreezeViolationError, MissingDependencyError, TrainingError
from clipreid.training import (
    Checkpoint,
    OptimSchedule,
    TextFeatureCache,
    lr_at,
    make_checkpoint,
    parameter_hashes,
    precompute_image_features,
    pretrain_stage0,
    run_baseline,
    run_one_stage,
    run_stage1,
    run_stage1_averaged,
    run_stage2,
)
from clipreid.training.checkpoint import ARRAYS, MANIFEST
from clipreid.training.model import images_to_tensor, stage2_weights
from clipreid.training.stages import LossLog

from conftest import tiny_config, tiny_model


def group_hashes(model, group):
    return parameter_hashes(model.parameter_groups()[group])


def mean_pair_similarity(model, feats):
    with torch.no_grad():
        T = model.all_text_features()
        return model.sim(feats.features, T[feats.labels]).diagonal().mean().item()


# --- schedules -----------------------------------------------------------------------

def test_lr_warmup_and_milestones():
    s = OptimSchedule(base_lr=3.5e-4, total_epochs=120, warmup_epochs=10, warmup_start_lr=3.5e-6,
                      decay="milestones", milestones=(40, 70), gamma=0.1)
    assert lr_at(s, 0, 0.0) == 3.5e-6
    assert lr_at(s, 10, 0.0) == 3.5e-4
    assert lr_at(s, 75) == pytest.approx(3.5e-4 * 0.01, rel=1e-12)
    with pytest.raises(ConfigError):
        lr_at(s, 121)


def test_lr_monotone():
    for decay in ("cosine", "milestones"):
        s = OptimSchedule(base_lr=1.0, total_epochs=20, warmup_epochs=5, warmup_start_lr=0.01,
                          decay=decay, milestones=(8, 14))
        ts = [(e, f) for e in range(20) for f in (0.0, 0.25, 0.5, 0.75)]
        lrs = [lr_at(s, e, f) for e, f in ts]
        warm = [lr for (e, _), lr in zip(ts, lrs) if e < 5]
        rest = [lr for (e, _), lr in zip(ts, lrs) if e >= 5]
        assert warm == sorted(warm) and rest == sorted(rest, reverse=True)
        assert lr_at(s, 4, 0.999999) == pytest.approx(lr_at(s, 5, 0.0), rel=1e-5)


def test_schedule_validation():
    with pytest.raises(ConfigError):
        OptimSchedule(base_lr=1.0, total_epochs=5, milestones=(3, 3))
    with pytest.raises(ConfigError):
        OptimSchedule(base_lr=1.0, total_epochs=5, warmup_epochs=1, warmup_start_lr=2.0)


# --- model plumbing --------------------------------------------------------------------

def test_stage2_weight_defaults():
    assert stage2_weights(tiny_config()) == (0.25, 1.0, 1.0)
    assert stage2_weights(tiny_config(**{"model.variant": "cnn"})) == (1.0, 1.0, 1.0)
    assert stage2_weights(tiny_config(**{"loss.w_id": 0.5})) == (0.5, 1.0, 1.0)


def test_images_to_tensor():
    x = images_to_tensor(np.full((2, 4, 4, 3), 255, dtype=np.uint8))
    assert x.shape == (2, 3, 4, 4) and torch.all(x == 1.0)


def test_prompt_override_m(tiny_ds):
    model = tiny_model(tiny_ds, tiny_config(M=8))
    assert model.bank.M == 8 and model.template.M == 8


# --- stage 0 -----------------------------------------------------------------------------

def test_stage0_zero_epochs_is_identity(tiny_ds):
    model = tiny_model(tiny_ds)
    before = parameter_hashes(model)
    pretrain_stage0(model, tiny_ds, tiny_config(**{"stage0.epochs": 0}))
    assert parameter_hashes(model) == before


def test_stage0_smoke_and_checkpoint(tiny_ds, tmp_path):
    cfg = tiny_config(**{"stage0.epochs": 1})
    model = tiny_model(tiny_ds, cfg)
    log = pretrain_stage0(model, tiny_ds, cfg)
    assert log.trace("stage0") and all(np.isfinite(log.trace("stage0")))
    ck = make_checkpoint(model, cfg, "stage0", tiny_ds.n_cameras, (16, 16), tiny_ds.kind)
    ck.save(tmp_path / "ck")
    rebuilt = Checkpoint.load(tmp_path / "ck").build_model()
    assert parameter_hashes(rebuilt) == parameter_hashes(model)


def test_stage0_divergence(tiny_ds):
    cfg = tiny_config(**{"loss.tau": float("nan")})
    with pytest.raises(TrainingError) as info:
        pretrain_stage0(tiny_model(tiny_ds, cfg), tiny_ds, cfg)
    assert info.value.step == 0


@pytest.mark.slow
def test_stage0_retrieval_sanity(tmp_path):
    root = tmp_path / "ds"
    generate_synthetic(SyntheticSpec(n_train_ids=8, n_test_ids=6, images_per_id=8, n_cameras=2,
                                     image_hw=(16, 16), n_pretrain_ids=60, seed=1), root, ctx_len=16)
    ds = load_dataset(root)
    cfg = tiny_config(**{"stage0.epochs": 12, "stage0.batch": 32})
    model = tiny_model(ds, cfg)
    pretrain_stage0(model, ds, cfg)
    idents = {d["pid"]: Identity(**d) for d in ds.meta["identities"]}
    test = ds.split("gallery")
    caps = sorted({idents[p].caption(ds.kind) for p in test.pids.tolist()})
    cap_index = np.array([caps.index(idents[p].caption(ds.kind)) for p in test.pids.tolist()])
    with torch.no_grad():
        V = model.encode_image(images_to_tensor(test.images)).post
        T = model.encoder.encode_token_ids(torch.from_numpy(np.stack([model.vocab.tokenize(c) for c in caps])))
        S = model.sim(V, T).numpy()
    matched = S[np.arange(len(S)), cap_index].mean()
    mask = np.ones_like(S, dtype=bool)
    mask[np.arange(len(S)), cap_index] = False
    assert matched > S[mask].mean()


# --- stage 1 -------------------------------------------------------------------------------

def test_precompute_cache(tiny_ds):
    model = tiny_model(tiny_ds)
    a = precompute_image_features(model, tiny_ds)
    b = precompute_image_features(model, tiny_ds)
    assert len(a.paths) == len(tiny_ds.split("train")) == a.features.shape[0]
    assert torch.equal(a.features, b.features)
    for y in range(tiny_ds.n_train_ids):
        assert torch.allclose(a.means[y], a.features[a.labels == y].mean(0), atol=1e-6)


def test_precompute_single_image_mean(tmp_path):
    root = tmp_path / "ds"
    generate_synthetic(SyntheticSpec(n_train_ids=3, n_test_ids=1, images_per_id=2, n_cameras=2,
                                     image_hw=(16, 16)), root, ctx_len=16)
    ds = load_dataset(root)
    # keep a single image for the first identity
    first = next(r for r in ds.records if r.split == "train" and r.pid == 0)
    ds.records = [r for r in ds.records if not (r.pid == 0 and r.split == "train" and r != first)]
    feats = precompute_image_features(tiny_model(ds), ds)
    assert torch.equal(feats.means[0], feats.features[feats.labels == 0][0])


def test_precompute_missing_image(tmp_path):
    root = tmp_path / "ds"
    generate_synthetic(SyntheticSpec(n_train_ids=2, n_test_ids=1, images_per_id=2, n_cameras=2,
                                     image_hw=(16, 16)), root, ctx_len=16)
    next((root / "train").glob("*.png")).unlink()
    ds = load_dataset(root)
    with pytest.raises(IOError):
        precompute_image_features(tiny_model(ds), ds)


def test_stage1_zero_epochs(tiny_ds):
    model = tiny_model(tiny_ds)
    with torch.no_grad():
        expected = model.all_text_features()
    cache = run_stage1(model, tiny_ds, tiny_config(**{"stage1.epochs": 0}))
    assert torch.equal(cache.features, expected)


def test_stage1_freeze_and_improvement(tiny_ds):
    cfg = tiny_config(**{"stage0.epochs": 4, "stage1.epochs": 10})
    model = tiny_model(tiny_ds, cfg)
    pretrain_stage0(model, tiny_ds, cfg)
    feats = precompute_image_features(model, tiny_ds)
    before = {g: group_hashes(model, g) for g in ("image", "text", "heads", "bank")}
    sim0 = mean_pair_similarity(model, feats)
    cache = run_stage1(model, tiny_ds, cfg, feats=feats)
    for g in ("image", "text", "heads"):
        assert group_hashes(model, g) == before[g]
    assert group_hashes(model, "bank") != before["bank"]
    assert mean_pair_similarity(model, feats) > sim0
    # the cached row y matches a fresh encoding of the saved bank
    with torch.no_grad():
        model.bank.embeddings.copy_(cache.bank)
        assert torch.allclose(model.all_text_features(), cache.features, atol=1e-6)


def test_stage1_freeze_violation_hook(tiny_ds, monkeypatch):
    model = tiny_model(tiny_ds)
    original = model.text_features

    def tampering(ids):
        with torch.no_grad():
            model.encoder.image.proj.bias.add_(1.0)
        return original(ids)

    monkeypatch.setattr(model, "text_features", tampering)
    with pytest.raises(FreezeViolationError):
        run_stage1(model, tiny_ds, tiny_config(**{"stage1.epochs": 1}))


def test_stage1_requires_tokens(tiny_ds):
    with pytest.raises(ContractError):
        run_stage1(tiny_model(tiny_ds, tiny_config(M=0)), tiny_ds, tiny_config(M=0))


def test_averaged_freeze(tiny_ds):
    cfg = tiny_config(**{"stage1.epochs": 5, "stage1.averaged_steps": 2})
    model = tiny_model(tiny_ds, cfg)
    before = {g: group_hashes(model, g) for g in ("image", "text", "heads", "bank")}
    log = LossLog()
    run_stage1_averaged(model, tiny_ds, cfg, log)
    assert len(log.trace("stage1_averaged")) == 10
    for g in ("image", "text", "heads"):
        assert group_hashes(model, g) == before[g]
    assert group_hashes(model, "bank") != before["bank"]


def test_averaged_single_identity(tmp_path):
    root = tmp_path / "ds"
    generate_synthetic(SyntheticSpec(n_train_ids=1, n_test_ids=1, images_per_id=4, n_cameras=2,
                                     image_hw=(16, 16)), root, ctx_len=16)
    ds = load_dataset(root)
    cfg = tiny_config(**{"stage1.epochs": 3})
    model = tiny_model(ds, cfg)
    bank0 = model.bank.embeddings.detach().clone()
    log = LossLog()
    run_stage1_averaged(model, ds, cfg, log)
    assert log.trace("stage1_averaged") == [0.0, 0.0, 0.0]
    assert torch.equal(model.bank.embeddings, bank0)


# --- stage 2 family --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def stage1_state(tiny_ds):
    cfg = tiny_config()
    model = tiny_model(tiny_ds, cfg)
    cache = run_stage1(model, tiny_ds, cfg)
    return copy.deepcopy(model.state_dict()), cache


def _from_state(tiny_ds, state, cfg):
    model = tiny_model(tiny_ds, cfg)
    model.load_state_dict(state)
    return model


def test_stage2_freeze(tiny_ds, stage1_state):
    state, cache = stage1_state
    cfg = tiny_config()
    model = _from_state(tiny_ds, state, cfg)
    before = {g: group_hashes(model, g) for g in ("image", "text", "bank")}
    digest = cache.digest()
    log = run_stage2(model, tiny_ds, cfg, cache)
    assert cache.digest() == digest
    assert group_hashes(model, "text") == before["text"]
    assert group_hashes(model, "bank") == before["bank"]
    assert group_hashes(model, "image") != before["image"]
    assert all(v > 0 for v in log.trace("stage2", "i2tce"))


def test_stage2_zero_weights_changes_nothing(tiny_ds, stage1_state):
    state, cache = stage1_state
    cfg = tiny_config(**{"loss.w_id": 0, "loss.w_tri": 0, "loss.w_i2tce": 0})
    model = _from_state(tiny_ds, state, cfg)
    before = group_hashes(model, "image")
    run_stage2(model, tiny_ds, cfg, cache)
    assert group_hashes(model, "image") == before


def test_stage2_cache_mismatch(tiny_ds, stage1_state):
    state, cache = stage1_state
    bad = TextFeatureCache(cache.features[:-1], None)
    with pytest.raises(ContractError):
        run_stage2(_from_state(tiny_ds, state, tiny_config()), tiny_ds, tiny_config(), bad)
    with pytest.raises(ContractError):
        run_stage2(_from_state(tiny_ds, state, tiny_config()), tiny_ds, tiny_config(), None)


def test_stage2_text_proj_flag_rejected_with_cache(tiny_ds, stage1_state):
    state, cache = stage1_state
    cfg = tiny_config(**{"stage2.train_text_proj": True})
    with pytest.raises(ConfigError):
        run_stage2(_from_state(tiny_ds, state, cfg), tiny_ds, cfg, cache)


def test_stage2_frozen_image_projection(tiny_ds, stage1_state):
    state, cache = stage1_state
    cfg = tiny_config(**{"stage2.train_image_proj": False})
    model = _from_state(tiny_ds, state, cfg)
    proj = parameter_hashes({n: p for n, p in model.named_parameters() if n.startswith("encoder.image.proj.")})
    run_stage2(model, tiny_ds, cfg, cache)
    assert parameter_hashes({n: p for n, p in model.named_parameters()
                             if n.startswith("encoder.image.proj.")}) == proj


def test_baseline_equals_stage2_without_i2tce(tiny_ds, stage1_state):
    state, cache = stage1_state
    cfg = tiny_config(**{"loss.w_i2tce": 0})
    a, b = LossLog(), LossLog()
    run_baseline(_from_state(tiny_ds, state, cfg), tiny_ds, cfg, a)
    run_stage2(_from_state(tiny_ds, state, cfg), tiny_ds, cfg, cache, b)
    assert a.trace("stage2") == b.trace("stage2")
    assert a.trace("stage2", "tri") == b.trace("stage2", "tri")


def test_one_stage_updates_both(tiny_ds):
    cfg = tiny_config(**{"stage2.epochs": 1})
    model = tiny_model(tiny_ds, cfg)
    before = {g: group_hashes(model, g) for g in ("image", "text", "bank")}
    log = run_one_stage(model, tiny_ds, cfg)
    assert group_hashes(model, "image") != before["image"]
    assert group_hashes(model, "bank") != before["bank"]
    assert group_hashes(model, "text") == before["text"]
    assert all(v > 0 for v in log.trace("one_stage", "stage1"))


def test_one_stage_text_projection_flag(tiny_ds):
    cfg = tiny_config(**{"stage2.epochs": 1, "stage2.train_text_proj": True})
    model = tiny_model(tiny_ds, cfg)
    proj = parameter_hashes({n: p for n, p in model.named_parameters() if n.startswith("encoder.text.proj.")})
    run_one_stage(model, tiny_ds, cfg)
    assert parameter_hashes({n: p for n, p in model.named_parameters()
                             if n.startswith("encoder.text.proj.")}) != proj


# --- checkpoints -------------------------------------------------------------------------------

def test_checkpoint_bitwise_roundtrip(tiny_ds, stage1_state, tmp_path):
    state, cache = stage1_state
    cfg = tiny_config()
    model = _from_state(tiny_ds, state, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    model.all_text_features().sum().backward()
    opt.step()
    ck = make_checkpoint(model, cfg, "stage1", tiny_ds.n_cameras, (16, 16), tiny_ds.kind,
                         step=7, epoch=3, text_cache=cache.features, optimizers={"main": opt})
    ck.save(tmp_path / "a")
    loaded = Checkpoint.load(tmp_path / "a")
    loaded.save(tmp_path / "b")
    for name in (ARRAYS, MANIFEST):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert torch.equal(torch.from_numpy(loaded.text_cache), cache.features)
    assert loaded.step == 7 and loaded.seed == cfg["seed"]


def test_checkpoint_validation(tiny_ds, tmp_path):
    import json

    model = tiny_model(tiny_ds)
    make_checkpoint(model, tiny_config(), "stage0", 2, (16, 16), "person").save(tmp_path / "ck")
    man = json.loads((tmp_path / "ck" / MANIFEST).read_text())
    key = next(iter(man["arrays"]))
    man["arrays"][key]["shape"] = [999]
    (tmp_path / "ck" / MANIFEST).write_text(json.dumps(man))
    with pytest.raises(ContractError):
        Checkpoint.load(tmp_path / "ck")
    with pytest.raises(MissingDependencyError):
        Checkpoint.load(tmp_path / "nothing")


def test_deterministic_traces(tiny_ds):
    cfg = tiny_config(**{"stage2.epochs": 1})
    a, b = LossLog(), LossLog()
    run_one_stage(tiny_model(tiny_ds, cfg), tiny_ds, cfg, a)
    run_one_stage(tiny_model(tiny_ds, cfg), tiny_ds, cfg, b)
    assert a.records == b.records


# --- stage hand-over ------------------------------------------------------------------------

def test_train_stage_prerequisites(tiny_ds):
    from clipreid.training.pipeline import train_stage
    cfg = tiny_config(**{"stage0.epochs": 0})
    with pytest.raises(MissingDependencyError):
        train_stage("stage1", cfg, tiny_ds)
    s0 = train_stage("stage0", cfg, tiny_ds).checkpoint
    with pytest.raises(MissingDependencyError, match="text feature cache"):
        train_stage("stage2", cfg, tiny_ds, s0)
    with pytest.raises(ConfigError):
        train_stage("stage3", cfg, tiny_ds, s0)


def test_transfer_keeps_encoders_and_resets_bank(tiny_ds):
    from clipreid.training.pipeline import train_stage, transfer_arrays
    cfg = tiny_config(**{"stage0.epochs": 1})
    s0 = train_stage("stage0", cfg, tiny_ds).checkpoint
    sie = tiny_model(tiny_ds, cfg.updated(**{"sie.enabled": True, "prompt.M": 6}))
    left = transfer_arrays(sie, s0.arrays, fresh_bank=True)
    assert sorted(left) == ["bank.embeddings", "encoder.image.sie_embed"]
    for k, v in sie.state_dict().items():
        if k not in left:
            assert np.array_equal(v.numpy(), s0.arrays[f"model.{k}"])
    olp = tiny_model(tiny_ds, cfg.updated(**{"model.stride": 2}))
    with pytest.raises(ContractError, match="incompatible"):
        transfer_arrays(olp, s0.arrays, fresh_bank=True)


def test_stage0_key_ignores_prompt_and_finetuning(tiny_ds):
    from clipreid.training.pipeline import stage0_config, stage0_key
    cfg = tiny_config()
    same = cfg.updated(**{"prompt.M": 8, "stage2.lr": 1e-2, "loss.w_i2t": 1.0})
    assert stage0_key(stage0_config(cfg)) == stage0_key(stage0_config(same))
    assert stage0_key(stage0_config(cfg)) == stage0_key(stage0_config(cfg.updated(**{"sie.enabled": True})))
    assert stage0_key(cfg) != stage0_key(cfg.updated(**{"model.stride": 2}))


def test_stage0_pool_and_recipe(tiny_ds):
    from clipreid.training.pipeline import Stage0Pool, run_recipe
    cfg = tiny_config()
    pool = Stage0Pool(tiny_ds)
    assert pool.get(cfg) is pool.get(cfg.updated(**{"prompt.M": 2}))
    out = run_recipe("two-stage", cfg, tiny_ds, pool)
    assert set(out.results) == {"stage1", "stage2"} and 0 <= out.report.mAP <= 1
    with pytest.raises(ConfigError):
        run_recipe("three-stage", cfg, tiny_ds, pool)
