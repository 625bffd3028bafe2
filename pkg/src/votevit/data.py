"""Synthetic binocular fundus-like data: paired grayscale images with a
planted bright disc whose cup size encodes disease severity, patient
metadata, and multi-rater binary grades summarized as soft labels.

Severity is correlated between the two eyes at a configurable level; the
latent correlation is calibrated by quadrature so the post-squashing
severity correlation lands on the requested value, not just the latent
one.  Everything is driven by explicit counter-based streams, so a config
plus seed maps to one exact dataset, byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from .tensor import ConfigError, Rng

DATASET_FORMAT = "votevit-dataset"
DATASET_VERSION = 1

_REQUIRED_FIELDS = (
    "id", "age_years", "sex", "rater_votes", "y_vote", "sigma2_vote",
    "latent_severity", "fellow_severity", "disc_center", "disc_radius",
    "fellow_disc_center", "fellow_disc_radius", "target_img", "fellow_img",
)


class DatasetFormatError(ValueError):
    """A dataset file failed validation; the message carries the line number."""


@dataclass
class BinocularSample:
    """One graded patient: both eye images plus labels for every head.

    `disc_center` is (row, col) in pixels for the target eye's planted
    disc; the fellow fields describe the fellow image.  `rater_votes`
    are the individual binary grades behind the soft label.
    """

    id: str
    target_img: np.ndarray
    fellow_img: np.ndarray
    age_years: float
    sex: int
    rater_votes: list[int]
    y_vote: float
    sigma2_vote: float
    latent_severity: float
    fellow_severity: float
    disc_center: tuple[float, float]
    disc_radius: float
    fellow_disc_center: tuple[float, float]
    fellow_disc_radius: float

    @property
    def hard_label(self) -> int:
        return 1 if self.y_vote >= 0.5 else 0


@dataclass
class GeneratorConfig:
    n_samples: int = 2500
    image_size: int = 32
    image_channels: int = 1
    mean_raters: float = 3.0
    rho: float = 0.6
    age_effect: float = 0.8
    sex_effect: float = 0.3
    eye_noise: float = 0.8
    rater_noise: float = 0.12
    readout_noise: float = 0.18
    pixel_noise: float = 0.05
    severity_bias: float = -1.1
    background_level: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.n_samples < 0:
            raise ConfigError("n_samples must be >= 0")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16 so the disc fits")
        if self.image_channels < 1:
            raise ConfigError("image_channels must be >= 1")
        if self.mean_raters < 1.0:
            raise ConfigError("mean_raters must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if self.eye_noise <= 0.0:
            raise ConfigError("eye_noise must be positive")
        if self.rater_noise < 0.0 or self.pixel_noise < 0.0 \
                or self.readout_noise < 0.0:
            raise ConfigError("noise levels must be >= 0")
        if not 0.0 <= self.background_level <= 0.6:
            raise ConfigError("background_level must be in [0, 0.6]")


def external_cohort_config(seed: int = 1) -> GeneratorConfig:
    """A shifted-texture preset standing in for an external test cohort."""
    return GeneratorConfig(rho=0.5, pixel_noise=0.12, background_level=0.35,
                           severity_bias=-0.9, mean_raters=2.0, seed=seed)


# -- flat key=value config files ---------------------------------------


def read_kv_file(path) -> dict[str, str]:
    """Parse `key = value` lines; blank lines and # comments are skipped."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got '{stripped}'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key '{key}'")
            out[key] = value
    return out


def write_kv_file(path, kv: dict[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in kv.items():
            fh.write(f"{key} = {value}\n")


def apply_kv(config, kv: dict[str, str], label: str):
    """Overlay string key=value pairs onto a dataclass; unknown keys fail."""
    known = {f.name for f in fields(config)}
    for key, raw in kv.items():
        if key not in known:
            raise ConfigError(f"unknown {label} config key '{key}'")
        current = getattr(config, key)
        try:
            if isinstance(current, bool):
                if raw.lower() not in ("true", "false"):
                    raise ValueError
                value = raw.lower() == "true"
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"{label} config key '{key}': cannot parse '{raw}' "
                              f"as {type(current).__name__}") from None
        setattr(config, key, value)
    config.validate()
    return config


# -- latent correlation calibration ------------------------------------

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(48)
_GH_NORM = math.sqrt(2.0 * math.pi)


def _severity_corr(r: float, mu: float, sigma: float) -> float:
    """Correlation of expit(mu + sigma*U), expit(mu + sigma*V) for standard
    bivariate normal (U, V) with correlation r, by Gauss-Hermite quadrature."""
    x = _GH_NODES
    w = _GH_WEIGHTS / _GH_NORM
    f = expit(mu + sigma * x)
    m = float(w @ f)
    var = float(w @ (f * f)) - m * m
    if var <= 0.0:
        return 0.0
    s = math.sqrt(max(0.0, 1.0 - r * r))
    inner = expit(mu + sigma * (r * x[:, None] + s * x[None, :]))  # [i, j]
    joint = float((w * f) @ (inner @ w))
    return (joint - m * m) / var


def _latent_corr_for(rho: float, mu: float, sigma: float) -> float:
    """Invert the squashed correlation: find r with corr(sev, sev') = rho."""
    if rho <= 0.0:
        return 0.0
    if rho >= 1.0:
        return 1.0
    return float(brentq(lambda r: _severity_corr(r, mu, sigma) - rho,
                        0.0, 1.0, xtol=1e-10))


# -- rendering ----------------------------------------------------------


def _render_eye(rendered_severity: float, rng: Rng, cfg: GeneratorConfig
                ) -> tuple[np.ndarray, tuple[float, float], float]:
    """Draw one eye image: bright disc with a brighter central cup.

    The rendered severity drives two consistent cues, mirroring
    cup-to-disc ratio and neuroretinal rim loss: the cup radius fraction
    grows and the surrounding rim dims.  Both cues are strong relative
    to pixel noise; the information bottleneck is the readout noise
    applied to severity before rendering, not the rendering itself.
    Returns (image [C,H,W], disc center (row, col), disc radius).
    """
    size = cfg.image_size
    r_lo, r_hi = 0.22 * size, 0.26 * size
    radius = r_lo + rng.uniform() * (r_hi - r_lo)
    margin = r_hi + 2.0
    cr = margin + rng.uniform() * (size - 2.0 * margin)
    cc = margin + rng.uniform() * (size - 2.0 * margin)
    rows = np.arange(size, dtype=np.float64)[:, None]
    cols = np.arange(size, dtype=np.float64)[None, :]
    dist = np.sqrt((rows - cr) ** 2 + (cols - cc) ** 2)
    cup_radius = radius * (0.1 + 0.8 * rendered_severity)
    base = np.full((size, size), cfg.background_level)
    base[dist <= radius] = 0.92 - 0.55 * rendered_severity
    base[dist <= cup_radius] = 0.95
    noise = rng.normal((size, size)) * cfg.pixel_noise
    img = np.clip(base + noise, 0.0, 1.0)
    img = np.round(img, 4)
    img = np.broadcast_to(img, (cfg.image_channels, size, size)).copy()
    return img, (cr, cc), radius


def _vote_probability(severity: float, rater_noise: float) -> float:
    if rater_noise > 0.0:
        return float(expit((severity - 0.5) / rater_noise))
    if severity > 0.5:
        return 1.0
    return 0.5 if severity == 0.5 else 0.0


def generate_dataset(cfg: GeneratorConfig) -> list[BinocularSample]:
    """Generate n_samples independent patients from per-sample child streams."""
    cfg.validate()
    shared_var = cfg.age_effect ** 2 + 0.25 * cfg.sex_effect ** 2
    total_var = shared_var + cfg.eye_noise ** 2
    total_sd = math.sqrt(total_var)
    latent_r = _latent_corr_for(cfg.rho, cfg.severity_bias, total_sd)
    resid_corr = (latent_r * total_var - shared_var) / cfg.eye_noise ** 2
    resid_corr = min(1.0, max(-1.0, resid_corr))
    resid_mix = math.sqrt(max(0.0, 1.0 - resid_corr ** 2))
    root = Rng(cfg.seed)
    samples: list[BinocularSample] = []
    for i in range(cfg.n_samples):
        rng = root.child("sample", i)
        z_age = rng.normal()
        sex = int(rng.integers(0, 2))
        u_t = rng.normal()
        u_w = rng.normal()
        shared = cfg.severity_bias + cfg.age_effect * z_age \
            + cfg.sex_effect * (sex - 0.5)
        e_t = cfg.eye_noise * u_t
        e_f = cfg.eye_noise * (resid_corr * u_t + resid_mix * u_w)
        sev_t = float(expit(shared + e_t))
        sev_f = float(expit(shared + e_f))
        # the images encode a noisy readout of severity; the fellow eye's
        # readout carries complementary evidence about the target's state
        read_t = float(np.clip(sev_t + cfg.readout_noise * rng.normal(), 0.0, 1.0))
        read_f = float(np.clip(sev_f + cfg.readout_noise * rng.normal(), 0.0, 1.0))
        target_img, t_center, t_radius = _render_eye(read_t, rng, cfg)
        fellow_img, f_center, f_radius = _render_eye(read_f, rng, cfg)
        n_raters = 1 + int(rng.poisson(cfg.mean_raters - 1.0))
        p_vote = _vote_probability(sev_t, cfg.rater_noise)
        votes = [int(rng.uniform() < p_vote) for _ in range(n_raters)]
        vote_arr = np.asarray(votes, dtype=np.float64)
        y_vote = float(vote_arr.mean())
        sigma2 = float(vote_arr.var())
        age_years = round(float(np.clip(60.0 + 12.0 * z_age, 35.0, 90.0)), 2)
        samples.append(BinocularSample(
            id=f"s{i:05d}",
            target_img=target_img,
            fellow_img=fellow_img,
            age_years=age_years,
            sex=sex,
            rater_votes=votes,
            y_vote=y_vote,
            sigma2_vote=sigma2,
            latent_severity=sev_t,
            fellow_severity=sev_f,
            disc_center=t_center,
            disc_radius=t_radius,
            fellow_disc_center=f_center,
            fellow_disc_radius=f_radius,
        ))
    return samples


# -- serialization ------------------------------------------------------


def write_dataset(path, samples: Sequence[BinocularSample],
                  image_shape: Sequence[int] | None = None) -> None:
    """One JSON header line, then one JSON record per sample (JSONL).

    An empty dataset is written as the header alone, which requires an
    explicit `image_shape` since there is no sample to take it from.
    """
    if samples:
        shape = list(samples[0].target_img.shape)
    elif image_shape is not None:
        shape = list(image_shape)
    else:
        raise DatasetFormatError("cannot write an empty dataset without "
                                 "an explicit image_shape")
    header = {"format": DATASET_FORMAT, "version": DATASET_VERSION,
              "count": len(samples), "image_shape": shape}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in samples:
            record = {
                "id": s.id,
                "age_years": s.age_years,
                "sex": s.sex,
                "rater_votes": s.rater_votes,
                "y_vote": s.y_vote,
                "sigma2_vote": s.sigma2_vote,
                "latent_severity": s.latent_severity,
                "fellow_severity": s.fellow_severity,
                "disc_center": list(s.disc_center),
                "disc_radius": s.disc_radius,
                "fellow_disc_center": list(s.fellow_disc_center),
                "fellow_disc_radius": s.fellow_disc_radius,
                "target_img": s.target_img.tolist(),
                "fellow_img": s.fellow_img.tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def _parse_image(raw, shape: tuple[int, ...], lineno: int, name: str) -> np.ndarray:
    try:
        arr = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetFormatError(f"line {lineno}: field '{name}' is not a "
                                 f"numeric array") from None
    if arr.shape != shape:
        raise DatasetFormatError(f"line {lineno}: field '{name}' has shape "
                                 f"{arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise DatasetFormatError(f"line {lineno}: field '{name}' contains "
                                 f"non-finite values")
    return arr


def read_dataset(path) -> list[BinocularSample]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: invalid JSON header: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
        raise DatasetFormatError(f"line 1: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise DatasetFormatError(f"line 1: unsupported version {header.get('version')}")
    shape = tuple(header.get("image_shape", ()))
    count = header.get("count")
    samples: list[BinocularSample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {lineno}: invalid JSON: {exc}") from None
        for name in _REQUIRED_FIELDS:
            if name not in record:
                raise DatasetFormatError(f"line {lineno}: missing field '{name}'")
        y_vote = record["y_vote"]
        if not isinstance(y_vote, (int, float)) or not 0.0 <= y_vote <= 1.0:
            raise DatasetFormatError(f"line {lineno}: field 'y_vote' must be "
                                     f"in [0, 1], got {y_vote!r}")
        if record["sex"] not in (0, 1):
            raise DatasetFormatError(f"line {lineno}: field 'sex' must be 0 or 1")
        votes = record["rater_votes"]
        if (not isinstance(votes, list) or not votes
                or any(v not in (0, 1) for v in votes)):
            raise DatasetFormatError(f"line {lineno}: field 'rater_votes' must "
                                     f"be a nonempty list of 0/1")
        if record["sigma2_vote"] < 0.0:
            raise DatasetFormatError(f"line {lineno}: field 'sigma2_vote' must be >= 0")
        samples.append(BinocularSample(
            id=str(record["id"]),
            target_img=_parse_image(record["target_img"], shape, lineno, "target_img"),
            fellow_img=_parse_image(record["fellow_img"], shape, lineno, "fellow_img"),
            age_years=float(record["age_years"]),
            sex=int(record["sex"]),
            rater_votes=[int(v) for v in votes],
            y_vote=float(y_vote),
            sigma2_vote=float(record["sigma2_vote"]),
            latent_severity=float(record["latent_severity"]),
            fellow_severity=float(record["fellow_severity"]),
            disc_center=tuple(float(v) for v in record["disc_center"]),
            disc_radius=float(record["disc_radius"]),
            fellow_disc_center=tuple(float(v) for v in record["fellow_disc_center"]),
            fellow_disc_radius=float(record["fellow_disc_radius"]),
        ))
    if count is not None and count != len(samples):
        raise DatasetFormatError(f"header count {count} does not match "
                                 f"{len(samples)} records")
    return samples


# -- splitting ----------------------------------------------------------


def _allocate(counts: Sequence[int], take_total: int,
              available: Sequence[int]) -> list[int]:
    """Largest-remainder apportionment of take_total across strata,
    capped by per-stratum availability."""
    n = sum(counts)
    quotas = [take_total * c / n for c in counts]
    take = [min(math.floor(q), a) for q, a in zip(quotas, available)]
    order = sorted(range(len(counts)),
                   key=lambda i: (-(quotas[i] - math.floor(quotas[i])),
                                  -counts[i], i))
    short = take_total - sum(take)
    idx = 0
    while short > 0 and idx < 2 * len(counts):
        i = order[idx % len(counts)]
        if take[i] < available[i]:
            take[i] += 1
            short -= 1
        idx += 1
    return take


def split(samples: Sequence[BinocularSample], train_frac: float,
          val_frac: float, seed: int
          ) -> tuple[list[BinocularSample], list[BinocularSample], list[BinocularSample]]:
    """Deterministic stratified split on the hard label.

    Split sizes hit round(N * frac) exactly (up to availability), with
    each stratum represented proportionally via largest-remainder
    apportionment; test takes the remainder.
    """
    if train_frac < 0.0 or val_frac < 0.0 or train_frac + val_frac > 1.0:
        raise ConfigError(f"invalid split fractions train={train_frac} val={val_frac}")
    if not samples:
        raise ConfigError("cannot split an empty dataset")
    rng = Rng(seed).child("split")
    strata: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        strata.setdefault(s.hard_label, []).append(idx)
    labels = sorted(strata)
    shuffled: list[list[int]] = []
    for label in labels:
        members = strata[label]
        perm = rng.child("stratum", label).permutation(len(members))
        shuffled.append([members[int(p)] for p in perm])
    counts = [len(m) for m in shuffled]
    n = len(samples)
    n_train = round(n * train_frac)
    n_val = round(n * val_frac)
    take_train = _allocate(counts, n_train, counts)
    remaining = [c - t for c, t in zip(counts, take_train)]
    take_val = _allocate(counts, n_val, remaining)
    train: list[BinocularSample] = []
    val: list[BinocularSample] = []
    test: list[BinocularSample] = []
    for members, t_n, v_n in zip(shuffled, take_train, take_val):
        train.extend(samples[i] for i in members[:t_n])
        val.extend(samples[i] for i in members[t_n:t_n + v_n])
        test.extend(samples[i] for i in members[t_n + v_n:])
    return train, val, test


def positive_rate(samples: Iterable[BinocularSample]) -> float:
    labels = [s.hard_label for s in samples]
    return sum(labels) / len(labels)
