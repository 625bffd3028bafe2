"""Training objective: per-vote squared error against the soft rater label,
auxiliary metadata regression/classification terms, a variance-matching
penalty that ties vote spread to rater disagreement, and weight decay.

The variance penalty only applies when at least three raters graded the
sample; below that the empirical vote variance is too noisy to match, so
the term is a constant zero with no gradient path at all.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .model import BatchOutput, ModelConfig, ModelOutput, VoteBundle
from .tensor import Tensor, exp, log, subtract, tmean, tsum

MIN_RATERS_FOR_VARIANCE = 3


class LabelError(ValueError):
    """A label lies outside its documented domain."""


@dataclass
class LossBreakdown:
    """All loss components as graph nodes; `total` is the weighted sum."""

    l_vote: Tensor
    l_age: Tensor
    l_sex: Tensor
    l_reg: Tensor
    l_wd: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {
            "l_vote": self.l_vote.item(),
            "l_age": self.l_age.item(),
            "l_sex": self.l_sex.item(),
            "l_reg": self.l_reg.item(),
            "l_wd": self.l_wd.item(),
            "total": self.total.item(),
        }


def loss_vote(y_vote: float, bundle: VoteBundle) -> Tensor:
    """Mean squared error of each individual vote against the soft label."""
    if not 0.0 <= y_vote <= 1.0:
        raise LabelError(f"soft label must be in [0, 1], got {y_vote}")
    dev = subtract(bundle.votes, Tensor(float(y_vote)))
    return tmean(dev * dev)


def loss_age(y_age_std: float, age_pred: Tensor) -> Tensor:
    """Squared error on the standardized age target."""
    dev = age_pred - float(y_age_std)
    return dev * dev


def loss_sex(y_sex: int, sex_logits: Tensor) -> Tensor:
    """Two-class cross-entropy from raw logits, log-sum-exp stabilized."""
    if y_sex not in (0, 1):
        raise LabelError(f"sex label must be 0 or 1, got {y_sex}")
    if sex_logits.shape != (2,):
        raise LabelError(f"sex_logits must have shape (2,), got {sex_logits.shape}")
    shift = float(sex_logits.data.max())
    lse = log(tsum(exp(sex_logits - shift))) + shift
    return lse - sex_logits[y_sex]


def loss_reg(bundle: VoteBundle, sigma2_vote: float, rater_count: int) -> Tensor:
    """Squared gap between vote variance and rater-disagreement variance.

    Gated: with fewer than MIN_RATERS_FOR_VARIANCE raters this returns a
    constant zero whose gradient is structurally zero (no graph edge).
    """
    if sigma2_vote < 0.0:
        raise LabelError(f"label variance must be >= 0, got {sigma2_vote}")
    if rater_count < MIN_RATERS_FOR_VARIANCE:
        return Tensor(0.0)
    dev = bundle.variance - float(sigma2_vote)
    return dev * dev


def loss_weight_decay(params: Iterable[Tensor]) -> Tensor:
    """Sum of squared parameter entries across all tensors."""
    total: Tensor | None = None
    for p in params:
        term = tsum(p * p)
        total = term if total is None else total + term
    return Tensor(0.0) if total is None else total


def loss_total(sample, output: ModelOutput, config: ModelConfig,
               params: Sequence[Tensor] = (),
               age_mean: float = 0.0, age_std: float = 1.0) -> LossBreakdown:
    """Assemble the full objective for one sample.

    Disabled branches contribute exact constant zeros: with metadata off
    the age/sex terms vanish, and with voting off the variance penalty is
    dropped (a single deterministic pass has no spread to match).  Weight
    decay is only computed when `params` is nonempty, so batch loops can
    add it once per step rather than per sample.
    """
    zero = Tensor(0.0)
    l_vote = loss_vote(sample.y_vote, output.vote_bundle)
    if config.use_metadata:
        if output.age_pred is None or output.sex_logits is None:
            raise LabelError("metadata heads missing from output with use_metadata=true")
        if age_std <= 0.0:
            raise LabelError(f"age_std must be positive, got {age_std}")
        y_age_std = (sample.age_years - age_mean) / age_std
        l_age = loss_age(y_age_std, output.age_pred)
        l_sex = loss_sex(sample.sex, output.sex_logits)
    else:
        l_age = zero
        l_sex = zero
    if config.use_voting:
        l_reg = loss_reg(output.vote_bundle, sample.sigma2_vote, len(sample.rater_votes))
    else:
        l_reg = zero
    l_wd = loss_weight_decay(params) if params else zero
    total = (l_vote
             + l_age * config.lambda_age
             + l_sex * config.lambda_sex
             + l_reg * config.lambda_reg
             + l_wd * config.lambda_wd)
    return LossBreakdown(l_vote=l_vote, l_age=l_age, l_sex=l_sex,
                         l_reg=l_reg, l_wd=l_wd, total=total)


def loss_total_batch(samples: Sequence, output: BatchOutput, config: ModelConfig,
                     params: Sequence[Tensor] = (),
                     age_mean: float = 0.0, age_std: float = 1.0) -> LossBreakdown:
    """Batched `loss_total`: every component is the mean of the per-sample
    values, so one backward pass per minibatch reproduces per-sample
    gradient accumulation at 1/b scale."""
    b, n = output.votes.shape
    if len(samples) != b:
        raise LabelError(f"{len(samples)} samples but batch outputs have {b} rows")
    zero = Tensor(0.0)
    y = np.asarray([s.y_vote for s in samples], dtype=np.float64)
    if ((y < 0.0) | (y > 1.0)).any():
        raise LabelError("soft labels must be in [0, 1]")
    dev = subtract(output.votes, Tensor(np.repeat(y[:, None], n, axis=1)))
    l_vote = tmean(dev * dev)
    if config.use_metadata:
        if output.age_pred is None or output.sex_logits is None:
            raise LabelError("metadata heads missing from output with use_metadata=true")
        if age_std <= 0.0:
            raise LabelError(f"age_std must be positive, got {age_std}")
        ages = np.asarray([s.age_years for s in samples], dtype=np.float64)
        a_dev = subtract(output.age_pred, Tensor((ages - age_mean) / age_std))
        l_age = tmean(a_dev * a_dev)
        labels = [s.sex for s in samples]
        if any(v not in (0, 1) for v in labels):
            raise LabelError("sex labels must be 0 or 1")
        shift = output.sex_logits.data.max(axis=1, keepdims=True)
        shifted = subtract(output.sex_logits, Tensor(np.repeat(shift, 2, axis=1)))
        lse = log(tsum(exp(shifted), axis=-1)) + Tensor(shift[:, 0])
        picked = output.sex_logits[np.arange(b), np.asarray(labels)]
        l_sex = tmean(subtract(lse, picked))
    else:
        l_age = zero
        l_sex = zero
    if config.use_voting:
        sig = np.asarray([s.sigma2_vote for s in samples], dtype=np.float64)
        if (sig < 0.0).any():
            raise LabelError("label variances must be >= 0")
        gate = np.asarray([1.0 if len(s.rater_votes) >= MIN_RATERS_FOR_VARIANCE
                           else 0.0 for s in samples])
        if gate.any():
            r_dev = subtract(output.variance, Tensor(sig))
            l_reg = tmean(r_dev * r_dev * Tensor(gate))
        else:
            l_reg = zero
    else:
        l_reg = zero
    l_wd = loss_weight_decay(params) if params else zero
    total = (l_vote
             + l_age * config.lambda_age
             + l_sex * config.lambda_sex
             + l_reg * config.lambda_reg
             + l_wd * config.lambda_wd)
    return LossBreakdown(l_vote=l_vote, l_age=l_age, l_sex=l_sex,
                         l_reg=l_reg, l_wd=l_wd, total=total)
