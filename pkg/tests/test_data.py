"""Synthetic generator, JSONL serialization, config files, splitting."""

import json
import math

import numpy as np
import pytest

from votevit.data import (BinocularSample, DatasetFormatError, GeneratorConfig,
                          apply_kv, external_cohort_config, generate_dataset,
                          read_dataset, read_kv_file, split, write_dataset,
                          write_kv_file)
from votevit.tensor import ConfigError


def small_config(**overrides) -> GeneratorConfig:
    base = dict(n_samples=40, image_size=16, seed=5)
    base.update(overrides)
    return GeneratorConfig(**base)


# -- generation ----------------------------------------------------------


def test_generated_sample_fields_and_ranges():
    cfg = small_config()
    samples = generate_dataset(cfg)
    assert len(samples) == 40
    assert len({s.id for s in samples}) == 40
    for s in samples:
        assert s.target_img.shape == (1, 16, 16)
        assert s.fellow_img.shape == (1, 16, 16)
        assert np.all((s.target_img >= 0.0) & (s.target_img <= 1.0))
        assert 35.0 <= s.age_years <= 90.0
        assert s.sex in (0, 1)
        assert len(s.rater_votes) >= 1
        assert all(v in (0, 1) for v in s.rater_votes)
        assert 0.0 <= s.y_vote <= 1.0
        assert 0.0 < s.latent_severity < 1.0
        assert s.disc_radius > 0.0


def test_soft_label_is_vote_mean_and_sigma2_is_vote_variance():
    for s in generate_dataset(small_config()):
        votes = np.asarray(s.rater_votes, dtype=np.float64)
        assert s.y_vote == votes.mean()
        assert s.sigma2_vote == votes.var()


def test_hard_label_ties_positive():
    s = generate_dataset(small_config(n_samples=1))[0]
    s.y_vote = 0.5
    assert s.hard_label == 1
    s.y_vote = 0.49
    assert s.hard_label == 0


def test_generation_is_deterministic_and_seed_sensitive():
    a = generate_dataset(small_config())
    b = generate_dataset(small_config())
    c = generate_dataset(small_config(seed=6))
    np.testing.assert_array_equal(a[0].target_img, b[0].target_img)
    assert a[0].rater_votes == b[0].rater_votes
    assert not np.array_equal(a[0].target_img, c[0].target_img)


def test_per_sample_streams_are_stable_under_prefix():
    """Sample i does not depend on how many samples precede it."""
    long = generate_dataset(small_config(n_samples=30))
    short = generate_dataset(small_config(n_samples=10))
    for s_long, s_short in zip(long[:10], short):
        np.testing.assert_array_equal(s_long.target_img, s_short.target_img)
        assert s_long.y_vote == s_short.y_vote


def test_zero_samples_allowed():
    assert generate_dataset(small_config(n_samples=0)) == []


def test_disc_fits_inside_image():
    for s in generate_dataset(small_config(n_samples=60, image_size=20)):
        for center, radius in ((s.disc_center, s.disc_radius),
                               (s.fellow_disc_center, s.fellow_disc_radius)):
            assert radius <= center[0] <= 20 - radius
            assert radius <= center[1] <= 20 - radius


def test_severity_correlation_matches_rho():
    """Measured Pearson correlation between the two eyes' severities sits
    within +/-0.05 of the configured rho."""
    for rho in (0.3, 0.6):
        cfg = GeneratorConfig(n_samples=3000, image_size=16, rho=rho, seed=9)
        samples = generate_dataset(cfg)
        sev_t = np.asarray([s.latent_severity for s in samples])
        sev_f = np.asarray([s.fellow_severity for s in samples])
        measured = float(np.corrcoef(sev_t, sev_f)[0, 1])
        assert abs(measured - rho) < 0.05, f"rho {rho}: measured {measured:.3f}"


def test_rho_zero_gives_near_zero_correlation():
    cfg = GeneratorConfig(n_samples=2000, image_size=16, rho=0.0, seed=2)
    samples = generate_dataset(cfg)
    sev_t = np.asarray([s.latent_severity for s in samples])
    sev_f = np.asarray([s.fellow_severity for s in samples])
    assert abs(float(np.corrcoef(sev_t, sev_f)[0, 1])) < 0.08


def test_severity_drives_brightness_cue():
    """The rendered ring darkens as severity grows, so images carry the
    label signal the encoder is supposed to find."""
    cfg = small_config(n_samples=300, pixel_noise=0.0, readout_noise=0.0)
    samples = generate_dataset(cfg)
    sev = np.asarray([s.latent_severity for s in samples])
    ring = np.asarray([float(np.quantile(s.target_img, 0.9)) for s in samples])
    corr = float(np.corrcoef(sev, ring)[0, 1])
    assert corr < -0.5, f"expected a strong darkening cue, corr {corr:.3f}"


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        GeneratorConfig(n_samples=-1).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(image_size=8).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(rho=1.5).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(mean_raters=0.5).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(eye_noise=0.0).validate()


def test_external_cohort_preset_differs_but_validates():
    cfg = external_cohort_config()
    cfg.validate()
    assert cfg.rho != GeneratorConfig().rho


# -- serialization -------------------------------------------------------


def test_dataset_round_trip_bit_exact(tmp_path):
    samples = generate_dataset(small_config())
    path = tmp_path / "data.jsonl"
    write_dataset(path, samples)
    loaded = read_dataset(path)
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert a.id == b.id
        np.testing.assert_array_equal(a.target_img, b.target_img)
        np.testing.assert_array_equal(a.fellow_img, b.fellow_img)
        assert a.age_years == b.age_years
        assert a.sex == b.sex
        assert a.rater_votes == b.rater_votes
        assert a.y_vote == b.y_vote
        assert a.sigma2_vote == b.sigma2_vote
        assert a.disc_center == b.disc_center
        assert a.disc_radius == b.disc_radius


def test_write_twice_byte_identical(tmp_path):
    samples = generate_dataset(small_config())
    p1 = tmp_path / "a.jsonl"
    p2 = tmp_path / "b.jsonl"
    write_dataset(p1, samples)
    write_dataset(p2, samples)
    assert p1.read_bytes() == p2.read_bytes()


def test_empty_dataset_needs_explicit_shape(tmp_path):
    path = tmp_path / "empty.jsonl"
    with pytest.raises(DatasetFormatError):
        write_dataset(path, [])
    write_dataset(path, [], image_shape=(1, 16, 16))
    assert read_dataset(path) == []
    header = json.loads(path.read_text().splitlines()[0])
    assert header["count"] == 0


def test_read_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text("not json\n")
    with pytest.raises(DatasetFormatError, match="line 1"):
        read_dataset(path)
    path.write_text('{"format": "something-else", "version": 1}\n')
    with pytest.raises(DatasetFormatError):
        read_dataset(path)


def test_read_rejects_bad_records(tmp_path):
    samples = generate_dataset(small_config(n_samples=2))
    path = tmp_path / "data.jsonl"
    write_dataset(path, samples)
    lines = path.read_text().splitlines()

    def rewrite(mutate):
        record = json.loads(lines[2])
        mutate(record)
        path.write_text("\n".join([lines[0], lines[1], json.dumps(record)]) + "\n")

    rewrite(lambda r: r.pop("y_vote"))
    with pytest.raises(DatasetFormatError, match="line 3.*y_vote"):
        read_dataset(path)

    rewrite(lambda r: r.update(y_vote=1.5))
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_dataset(path)

    rewrite(lambda r: r.update(sex=3))
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_dataset(path)

    rewrite(lambda r: r.update(rater_votes=[]))
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_dataset(path)

    rewrite(lambda r: r.update(target_img=[[0.0]]))
    with pytest.raises(DatasetFormatError, match="line 3.*shape"):
        read_dataset(path)


def test_header_count_mismatch_detected(tmp_path):
    samples = generate_dataset(small_config(n_samples=3))
    path = tmp_path / "data.jsonl"
    write_dataset(path, samples)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:3]) + "\n")  # drop one record
    with pytest.raises(DatasetFormatError, match="count"):
        read_dataset(path)


# -- key=value config files ----------------------------------------------


def test_kv_round_trip(tmp_path):
    path = tmp_path / "gen.cfg"
    write_kv_file(path, {"n_samples": "12", "rho": "0.4"})
    kv = read_kv_file(path)
    cfg = apply_kv(GeneratorConfig(), kv, "generator")
    assert cfg.n_samples == 12
    assert cfg.rho == 0.4


def test_kv_comments_and_blank_lines(tmp_path):
    path = tmp_path / "gen.cfg"
    path.write_text("# comment\n\nn_samples = 7\n")
    assert read_kv_file(path) == {"n_samples": "7"}


def test_kv_rejects_unknown_key(tmp_path):
    path = tmp_path / "gen.cfg"
    path.write_text("definitely_not_a_key = 1\n")
    with pytest.raises(ConfigError, match="unknown"):
        apply_kv(GeneratorConfig(), read_kv_file(path), "generator")


def test_kv_rejects_bad_syntax_and_duplicates(tmp_path):
    path = tmp_path / "gen.cfg"
    path.write_text("just a line\n")
    with pytest.raises(ConfigError, match=":1"):
        read_kv_file(path)
    path.write_text("rho = 0.1\nrho = 0.2\n")
    with pytest.raises(ConfigError, match="duplicate"):
        read_kv_file(path)


def test_kv_rejects_unparseable_number(tmp_path):
    path = tmp_path / "gen.cfg"
    path.write_text("n_samples = many\n")
    with pytest.raises(ConfigError, match="n_samples"):
        apply_kv(GeneratorConfig(), read_kv_file(path), "generator")


# -- splitting -----------------------------------------------------------


def test_split_sizes_hit_rounded_targets():
    samples = generate_dataset(small_config(n_samples=100))
    train, val, test = split(samples, 0.8, 0.1, seed=0)
    assert len(train) == 80
    assert len(val) == 10
    assert len(test) == 10


def test_split_partitions_without_overlap():
    samples = generate_dataset(small_config(n_samples=60))
    train, val, test = split(samples, 0.6, 0.2, seed=3)
    ids = [s.id for s in train] + [s.id for s in val] + [s.id for s in test]
    assert sorted(ids) == sorted(s.id for s in samples)


def test_split_is_stratified_on_hard_label():
    samples = generate_dataset(GeneratorConfig(n_samples=400, image_size=16, seed=1))
    rate = np.mean([s.hard_label for s in samples])
    train, val, test = split(samples, 0.5, 0.25, seed=0)
    for part in (train, val, test):
        part_rate = np.mean([s.hard_label for s in part])
        # largest-remainder apportionment keeps the rate within one
        # sample of the pool rate in every part
        assert abs(part_rate - rate) <= 1.5 / len(part)


def test_split_deterministic_and_seed_sensitive():
    samples = generate_dataset(small_config(n_samples=50))
    t1, v1, s1 = split(samples, 0.7, 0.1, seed=4)
    t2, v2, s2 = split(samples, 0.7, 0.1, seed=4)
    t3, _, _ = split(samples, 0.7, 0.1, seed=5)
    assert [s.id for s in t1] == [s.id for s in t2]
    assert [s.id for s in v1] == [s.id for s in v2]
    assert [s.id for s in t1] != [s.id for s in t3]


def test_split_rejects_bad_fractions():
    samples = generate_dataset(small_config(n_samples=10))
    with pytest.raises(ConfigError):
        split(samples, 0.9, 0.2, seed=0)
    with pytest.raises(ConfigError):
        split(samples, -0.1, 0.5, seed=0)
    with pytest.raises(ConfigError):
        split([], 0.8, 0.1, seed=0)
