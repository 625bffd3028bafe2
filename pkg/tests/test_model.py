"""Model assembly: voting head mechanics, fusion, persistence, config."""

import math
from dataclasses import replace

import numpy as np
import pytest

from votevit.data import GeneratorConfig, generate_dataset
from votevit.model import (ModelConfig, VotingVit, attention_map,
                           config_from_kv, config_to_kv, predict_probability,
                           vote, vote_batch)
from votevit.nn import MlpHead
from votevit.tensor import ConfigError, Rng, Tensor


def tiny_config(**overrides) -> ModelConfig:
    base = dict(num_cross_blocks=2, num_votes=8, model_dim=8, num_heads=2,
                ffn_dim=16, encoder_blocks=1, head_hidden=4, patch_size=8,
                image_size=16)
    base.update(overrides)
    return ModelConfig(**base)


def sample_images(n=2, size=16, seed=0):
    samples = generate_dataset(GeneratorConfig(n_samples=n, image_size=size,
                                               seed=seed))
    return samples


def fwd(model, s, rng, train=False):
    fellow = Tensor(s.fellow_img) if model.config.use_binocular else None
    return model.forward(Tensor(s.target_img), fellow, rng, train)


def fwd_batch(model, samples, rng, train=False):
    targets = Tensor(np.stack([s.target_img for s in samples]))
    fellows = Tensor(np.stack([s.fellow_img for s in samples])) \
        if model.config.use_binocular else None
    return model.forward_batch(targets, fellows, rng, train)


# -- voting head mechanics ----------------------------------------------


def test_zero_dropout_gives_zero_vote_variance():
    head = MlpHead(Rng(0), [8, 4, 1], dropout_rate=0.0)
    z = Tensor(np.random.default_rng(0).normal(size=(8,)))
    bundle = vote(z, head, 16, Rng(1), dropout_active=True)
    assert bundle.variance.item() == 0.0
    assert len(set(bundle.values)) == 1


def test_active_dropout_gives_positive_vote_variance():
    head = MlpHead(Rng(0), [8, 4, 1], dropout_rate=0.3)
    z = Tensor(np.random.default_rng(0).normal(size=(8,)))
    positive = sum(
        vote(z, head, 16, Rng(trial), dropout_active=True).variance.item() > 0.0
        for trial in range(50))
    assert positive >= 49


def test_vote_bundle_moments_are_consistent():
    head = MlpHead(Rng(2), [8, 4, 1], dropout_rate=0.3)
    z = Tensor(np.random.default_rng(1).normal(size=(8,)))
    bundle = vote(z, head, 12, Rng(3))
    values = np.asarray(bundle.values)
    assert bundle.n == 12
    assert np.all((values > 0.0) & (values < 1.0))
    assert bundle.mean.item() == pytest.approx(values.mean(), rel=1e-12)
    assert bundle.variance.item() == pytest.approx(values.var(), rel=1e-12)
    assert predict_probability(bundle) == bundlele_mean \
        if False else predict_probability(bundle) == bundle.mean.item()


def test_vote_rejects_bad_count():
    head = MlpHead(Rng(0), [8, 4, 1], dropout_rate=0.0)
    z = Tensor(np.zeros(8))
    with pytest.raises(ConfigError):
        vote(z, head, 0, Rng(0))
    with pytest.raises(ConfigError):
        vote_batch(Tensor(np.zeros((2, 8))), head, 0, Rng(0))


def test_vote_batch_rows_match_moments():
    head = MlpHead(Rng(4), [8, 4, 1], dropout_rate=0.3)
    z = Tensor(np.random.default_rng(2).normal(size=(3, 8)))
    votes, mean, variance = vote_batch(z, head, 10, Rng(5))
    assert votes.shape == (3, 10)
    np.testing.assert_allclose(mean.data, votes.data.mean(axis=1), atol=1e-12)
    np.testing.assert_allclose(variance.data, votes.data.var(axis=1), atol=1e-12)


def test_vote_batch_equals_single_without_dropout():
    head = MlpHead(Rng(6), [8, 4, 1], dropout_rate=0.0)
    zs = np.random.default_rng(3).normal(size=(3, 8))
    votes, _, _ = vote_batch(Tensor(zs), head, 5, Rng(7))
    for i in range(3):
        single = vote(Tensor(zs[i]), head, 5, Rng(8))
        np.testing.assert_allclose(votes.data[i], single.votes.data, atol=1e-12)


# -- forward passes ------------------------------------------------------


def test_forward_without_voting_is_single_deterministic_pass():
    cfg = tiny_config(use_voting=False)
    model = VotingVit(cfg, Rng(0))
    s = sample_images(1)[0]
    out1 = fwd(model, s, Rng(1))
    out2 = fwd(model, s, Rng(2))
    assert out1.vote_bundle.n == 1
    assert out1.vote_bundle.variance.item() == 0.0
    assert out1.vote_bundle.mean.item() == out2.vote_bundle.mean.item()


def test_forward_voting_draws_fresh_masks_per_rng():
    cfg = tiny_config()
    model = VotingVit(cfg, Rng(0))
    s = sample_images(1)[0]
    out1 = fwd(model, s, Rng(1))
    out2 = fwd(model, s, Rng(2))
    assert out1.vote_bundle.n == cfg.num_votes
    assert out1.vote_bundle.mean.item() != out2.vote_bundle.mean.item()


def test_metadata_heads_present_only_when_enabled():
    s = sample_images(1)[0]
    with_meta = VotingVit(tiny_config(), Rng(0))
    out = fwd(with_meta, s, Rng(1))
    assert out.age_pred is not None
    assert out.sex_logits is not None and out.sex_logits.shape == (2,)
    without = VotingVit(tiny_config(use_metadata=False), Rng(0))
    out2 = fwd(without, s, Rng(1))
    assert out2.age_pred is None and out2.sex_logits is None


def test_batch_forward_matches_single_at_eval():
    cfg = tiny_config(head_dropout=0.0)
    model = VotingVit(cfg, Rng(3))
    samples = sample_images(3, seed=4)
    batch = fwd_batch(model, samples, Rng(5))
    for i, s in enumerate(samples):
        single = fwd(model, s, Rng(6))
        assert batch.mean.data[i] == pytest.approx(
            single.vote_bundle.mean.item(), rel=1e-10)


def test_monocular_model_ignores_fellow_stream():
    cfg = tiny_config(use_binocular=False)
    model = VotingVit(cfg, Rng(0))
    assert model.cross_from_target == []
    s = sample_images(1)[0]
    out = model.forward(Tensor(s.target_img), None, Rng(1), train=False)
    assert out.representation.attention == {}
    assert model.config.z_dim == cfg.model_dim


def test_binocular_z_doubles_and_requires_fellow():
    cfg = tiny_config()
    assert cfg.z_dim == 2 * cfg.model_dim
    model = VotingVit(cfg, Rng(0))
    s = sample_images(1)[0]
    with pytest.raises(ConfigError, match="fellow"):
        model.forward(Tensor(s.target_img), None, Rng(1), train=False)


def test_forward_validates_image_shape():
    model = VotingVit(tiny_config(), Rng(0))
    with pytest.raises(ConfigError, match="shape"):
        model.forward(Tensor(np.zeros((1, 8, 8))),
                      Tensor(np.zeros((1, 16, 16))), Rng(0), train=False)


# -- attention maps ------------------------------------------------------


def test_attention_map_grid_properties():
    cfg = tiny_config(patch_size=4)  # 4x4 grid per eye
    model = VotingVit(cfg, Rng(0))
    s = sample_images(1)[0]
    out = fwd(model, s, Rng(1))
    for eye in ("target", "fellow"):
        for block in range(cfg.num_cross_blocks):
            grid = attention_map(out, block, eye).data
            assert grid.shape == (4, 4)
            assert np.all(grid >= 0.0)
            assert grid.sum() <= 1.0 + 1e-12


def test_attention_map_errors():
    cfg = tiny_config()
    model = VotingVit(cfg, Rng(0))
    s = sample_images(1)[0]
    out = fwd(model, s, Rng(1))
    with pytest.raises(ConfigError, match="eye"):
        attention_map(out, 0, "left")
    with pytest.raises(ConfigError, match="out of range"):
        attention_map(out, cfg.num_cross_blocks, "target")
    mono = VotingVit(tiny_config(use_binocular=False), Rng(0))
    out_mono = fwd(mono, s, Rng(1))
    with pytest.raises(ConfigError, match="monocular"):
        attention_map(out_mono, 0, "target")


# -- running statistics --------------------------------------------------


def test_center_stats_update_during_batched_training_only():
    cfg = tiny_config()
    model = VotingVit(cfg, Rng(0))
    samples = sample_images(4, seed=2)
    before = model.z_center.copy()
    fwd_batch(model, samples, Rng(1))  # eval: no update
    np.testing.assert_array_equal(model.z_center, before)
    fwd_batch(model, samples, Rng(1), train=True)
    assert not np.array_equal(model.z_center, before)


def test_freeze_stats_pins_running_statistics():
    cfg = tiny_config()
    model = VotingVit(cfg, Rng(0))
    samples = sample_images(4, seed=2)
    fwd_batch(model, samples, Rng(1), train=True)
    frozen_center = model.z_center.copy()
    frozen_scale = model.z_scale.copy()
    model.freeze_stats = True
    fwd_batch(model, sample_images(4, seed=9), Rng(2), train=True)
    np.testing.assert_array_equal(model.z_center, frozen_center)
    np.testing.assert_array_equal(model.z_scale, frozen_scale)


def test_set_output_bias_writes_base_rate_logit():
    model = VotingVit(tiny_config(), Rng(0))
    model.set_output_bias(0.25)
    got = model.glaucoma_head.layers[-1].bias.data[0]
    assert got == pytest.approx(math.log(0.25 / 0.75), rel=1e-12)
    model.set_output_bias(0.0)  # clamps instead of diverging
    assert np.isfinite(model.glaucoma_head.layers[-1].bias.data[0])


# -- persistence ---------------------------------------------------------


def test_save_load_round_trip_preserves_behavior(tmp_path):
    cfg = tiny_config(head_dropout=0.0)
    model = VotingVit(cfg, Rng(7))
    samples = sample_images(4, seed=3)
    fwd_batch(model, samples, Rng(0), train=True)  # populate running stats
    model.age_mean, model.age_std = 61.5, 11.25
    path = tmp_path / "model.json"
    model.save(path)
    loaded = VotingVit.load(path)
    assert loaded.config == cfg
    assert loaded.age_mean == model.age_mean
    assert loaded.age_std == model.age_std
    np.testing.assert_array_equal(loaded.z_center, model.z_center)
    np.testing.assert_array_equal(loaded.z_scale, model.z_scale)
    s = samples[0]
    a = fwd(model, s, Rng(5)).vote_bundle.mean.item()
    b = fwd(loaded, s, Rng(5)).vote_bundle.mean.item()
    assert a == b


def test_save_is_deterministic(tmp_path):
    model = VotingVit(tiny_config(), Rng(7))
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    model.save(p1)
    model.save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_foreign_json(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"hello": 1}')
    with pytest.raises(ConfigError):
        VotingVit.load(path)


# -- config round trip ---------------------------------------------------


def test_config_kv_round_trip():
    cfg = tiny_config(use_binocular=False, head_dropout=0.15)
    kv = config_to_kv(cfg)
    back = config_from_kv(kv)
    assert back == cfg


def test_config_kv_partial_override():
    cfg = config_from_kv({"model_dim": "16", "use_voting": "false"})
    assert cfg.model_dim == 16
    assert cfg.use_voting is False
    assert cfg.ffn_dim == ModelConfig().ffn_dim


def test_config_kv_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="unknown"):
        config_from_kv({"hidden_size": "4"})
    with pytest.raises(ConfigError, match="number"):
        config_from_kv({"model_dim": "wide"})
    with pytest.raises(ConfigError):
        config_from_kv({"use_voting": "maybe"})


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(num_votes=0).validate()
    with pytest.raises(ConfigError):
        tiny_config(head_dropout=1.0).validate()
    with pytest.raises(ConfigError):
        tiny_config(model_dim=0).validate()
    with pytest.raises(ConfigError):
        tiny_config(image_size=15).validate()  # not divisible by patch
