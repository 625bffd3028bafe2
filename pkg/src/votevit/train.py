"""Training loop with minibatch gradient accumulation, validation-driven
model selection, and the ablation harness that retrains the model across
the feature-switch grid and aggregates test metrics over seeds.

Gradients are accumulated one sample at a time (each sample's graph is
freed right after its backward pass), with weight decay applied once per
optimizer step.  Model selection keeps the parameters with the best
validation Brier score seen at any evaluation point.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import BinocularSample, split
from .losses import loss_total_batch, loss_weight_decay
from .metrics import (DEFAULT_NUM_BINS, DEFAULT_THRESHOLD, CalibrationReport,
                      EvalRecord)
from .model import ModelConfig, VotingVit
from .tensor import (Adam, ConfigError, NumericOverflowError, Rng, Sgd, Tensor,
                     backward, no_grad, zero_grad)

EVAL_CHUNK = 64

METRIC_KEYS = ("recall", "f1", "brier", "auroc", "ece", "acc")

DEFAULT_ABLATION_TRIPLES = (
    (False, False, False),
    (True, False, False),
    (True, True, False),
    (True, True, True),
)


class TrainingDiverged(RuntimeError):
    """Total loss went non-finite; `epoch` records where."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 3e-3
    # the encoder keeps drifting under a constant rate, which stops the vote
    # head from ever settling; dropping the rate late lets it converge
    lr_decay: float = 0.1
    lr_decay_at: float = 0.5
    # heads may run at a different rate than the backbone (1.0 = same rate)
    head_lr_scale: float = 1.0
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 1
    train_frac: float = 0.8
    val_frac: float = 0.1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0.0 < self.lr_decay_at <= 1.0:
            raise ConfigError(f"lr_decay_at must be in (0, 1], got {self.lr_decay_at}")
        if self.head_lr_scale <= 0.0:
            raise ConfigError(f"head_lr_scale must be positive, got {self.head_lr_scale}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got '{self.optimizer}'")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.train_frac <= 0.0 or self.val_frac < 0.0 \
                or self.train_frac + self.val_frac > 1.0:
            raise ConfigError(f"invalid split fractions train={self.train_frac} "
                              f"val={self.val_frac}")


@dataclass
class EpochStats:
    epoch: int
    l_vote: float
    l_age: float
    l_sex: float
    l_reg: float
    l_wd: float
    total: float


@dataclass
class TrainResult:
    model: VotingVit
    history: list[EpochStats]
    val_history: list[tuple[int, float]]
    best_epoch: int
    best_val_brier: float


def _batch_inputs(model: VotingVit, batch) -> tuple[Tensor, Tensor | None]:
    targets = Tensor(np.stack([s.target_img for s in batch]))
    fellows = Tensor(np.stack([s.fellow_img for s in batch])) \
        if model.config.use_binocular else None
    return targets, fellows


def evaluate_with_votes(model: VotingVit, samples, rng: Rng,
                        num_bins: int = DEFAULT_NUM_BINS,
                        threshold: float = DEFAULT_THRESHOLD
                        ) -> tuple[list[EvalRecord], CalibrationReport,
                                   np.ndarray, np.ndarray]:
    """`evaluate` plus the per-sample vote mean and standard deviation."""
    records: list[EvalRecord] = []
    means: list[float] = []
    stds: list[float] = []
    with no_grad():
        for start in range(0, len(samples), EVAL_CHUNK):
            chunk = samples[start:start + EVAL_CHUNK]
            targets, fellows = _batch_inputs(model, chunk)
            out = model.forward_batch(targets, fellows,
                                      rng.child("chunk", start), train=False)
            for s, prob, var in zip(chunk, out.mean.data, out.variance.data):
                records.append(EvalRecord.from_soft(float(prob), s.y_vote))
                means.append(float(prob))
                stds.append(math.sqrt(max(float(var), 0.0)))
    report = CalibrationReport.compute(records, num_bins, threshold)
    return records, report, np.asarray(means), np.asarray(stds)


def evaluate(model: VotingVit, samples, rng: Rng,
             num_bins: int = DEFAULT_NUM_BINS,
             threshold: float = DEFAULT_THRESHOLD
             ) -> tuple[list[EvalRecord], CalibrationReport]:
    """Score samples in eval mode (vote dropout stays on) and aggregate."""
    records, report, _, _ = evaluate_with_votes(model, samples, rng,
                                                num_bins, threshold)
    return records, report


def train(model_config: ModelConfig, train_config: TrainConfig,
          train_set, val_set) -> TrainResult:
    model_config.validate()
    train_config.validate()
    if not train_set:
        raise ConfigError("empty training set")
    rng = Rng(train_config.seed)
    model = VotingVit(model_config, rng.child("init"))
    model.set_output_bias(float(np.mean([s.y_vote for s in train_set])))
    ages = np.asarray([s.age_years for s in train_set], dtype=np.float64)
    model.age_mean = float(ages.mean())
    std = float(ages.std())
    model.age_std = std if std > 0.0 else 1.0
    params = model.parameters()
    named = model.named_parameters()
    # decay slows only the backbone; the shallow heads keep the full rate so
    # they can settle onto the stabilised representation late in training.
    # the final norm shapes the representation, so it belongs with the backbone
    backbone = [p for name, p in named.items()
                if name.startswith(("embed.", "encoder.", "cross_", "final_norm"))]
    heads = [p for name, p in named.items()
             if not name.startswith(("embed.", "encoder.", "cross_", "final_norm"))]
    make = Adam if train_config.optimizer == "adam" else Sgd
    opt_backbone = make(train_config.learning_rate)
    opt_heads = make(train_config.learning_rate * train_config.head_lr_scale)
    lam_wd = model_config.lambda_wd
    history: list[EpochStats] = []
    val_history: list[tuple[int, float]] = []
    best_brier = math.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] | None = None
    n_train = len(train_set)
    decay_from = int(math.ceil(train_config.lr_decay_at * train_config.epochs))
    for epoch in range(train_config.epochs):
        if epoch >= decay_from:
            opt_backbone.lr = train_config.learning_rate * train_config.lr_decay
            model.freeze_stats = True
        order = rng.child("shuffle", epoch).permutation(n_train)
        sums = {"l_vote": 0.0, "l_age": 0.0, "l_sex": 0.0, "l_reg": 0.0}
        wd_sum = 0.0
        n_batches = 0
        try:
            for start in range(0, n_train, train_config.batch_size):
                batch = [train_set[int(i)]
                         for i in order[start:start + train_config.batch_size]]
                zero_grad(params)
                targets, fellows = _batch_inputs(model, batch)
                out = model.forward_batch(targets, fellows,
                                          rng.child("fwd", epoch, start), train=True)
                bd = loss_total_batch(batch, out, model_config, params=(),
                                      age_mean=model.age_mean, age_std=model.age_std)
                backward(bd.total)
                vals = bd.floats()
                for key in sums:
                    sums[key] += vals[key] * len(batch)
                if lam_wd > 0.0:
                    wd = loss_weight_decay(params)
                    backward(wd * lam_wd)
                    wd_sum += wd.item()
                else:
                    wd_sum += float(sum(np.sum(p.data * p.data) for p in params))
                n_batches += 1
                opt_backbone.step(backbone)
                opt_heads.step(heads)
        except NumericOverflowError as exc:
            raise TrainingDiverged(f"training diverged at epoch {epoch}: {exc}",
                                   epoch) from exc
        means = {key: value / n_train for key, value in sums.items()}
        wd_mean = wd_sum / n_batches
        total = (means["l_vote"]
                 + model_config.lambda_age * means["l_age"]
                 + model_config.lambda_sex * means["l_sex"]
                 + model_config.lambda_reg * means["l_reg"]
                 + lam_wd * wd_mean)
        history.append(EpochStats(epoch=epoch, l_vote=means["l_vote"],
                                  l_age=means["l_age"], l_sex=means["l_sex"],
                                  l_reg=means["l_reg"], l_wd=wd_mean, total=total))
        last = epoch == train_config.epochs - 1
        if val_set and ((epoch + 1) % train_config.eval_every == 0 or last):
            _, report = evaluate(model, val_set, rng.child("val", epoch))
            val_history.append((epoch, report.brier))
            if report.brier < best_brier:
                best_brier = report.brier
                best_epoch = epoch
                best_params = {name: p.data.copy() for name, p in named.items()}
                # the feature statistics move with the weights; restoring
                # one without the other skews every probability
                best_stats = (model.z_center.copy(), model.z_scale.copy())
    if best_params is not None:
        for name, p in named.items():
            p.data[...] = best_params[name]
        model.z_center, model.z_scale = best_stats
    else:
        best_epoch = train_config.epochs - 1
        best_brier = math.nan
    return TrainResult(model=model, history=history, val_history=val_history,
                       best_epoch=best_epoch, best_val_brier=best_brier)


def write_loss_csv(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,l_vote,l_age,l_sex,l_reg,l_wd,total\n")
        for row in history:
            fh.write(f"{row.epoch},{row.l_vote!r},{row.l_age!r},{row.l_sex!r},"
                     f"{row.l_reg!r},{row.l_wd!r},{row.total!r}\n")


def read_loss_csv(path) -> list[EpochStats]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "epoch,l_vote,l_age,l_sex,l_reg,l_wd,total":
        raise ConfigError(f"{path}: not a loss log csv")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 7:
            raise ConfigError(f"{path}: loss row has {len(cells)} cells, expected 7")
        rows.append(EpochStats(epoch=int(cells[0]), l_vote=float(cells[1]),
                               l_age=float(cells[2]), l_sex=float(cells[3]),
                               l_reg=float(cells[4]), l_wd=float(cells[5]),
                               total=float(cells[6])))
    return rows


# -- ablation harness ---------------------------------------------------


@dataclass
class AblationRow:
    use_binocular: bool
    use_voting: bool
    use_metadata: bool
    means: dict[str, float]
    sds: dict[str, float]
    seeds: list[int] = field(default_factory=list)


def _run_single(samples, model_config: ModelConfig, train_config: TrainConfig,
                triple: tuple[bool, bool, bool], seed: int,
                num_bins: int, threshold: float) -> dict[str, float]:
    mc = replace(model_config, use_binocular=triple[0], use_voting=triple[1],
                 use_metadata=triple[2])
    if not triple[1]:
        # the single-pass rows drop head dropout entirely so the contrast
        # isolates the voting mechanism rather than the dropout regulariser
        mc = replace(mc, head_dropout=0.0)
    tc = replace(train_config, seed=seed)
    train_set, val_set, test_set = split(samples, tc.train_frac, tc.val_frac, seed)
    result = train(mc, tc, train_set, val_set)
    _, report = evaluate(result.model, test_set, Rng(seed).child("test"),
                         num_bins, threshold)
    scalars = report.scalars()
    return {"recall": scalars["recall"], "f1": scalars["f1"],
            "brier": scalars["brier"], "auroc": scalars["auroc"],
            "ece": scalars["ece"], "acc": scalars["accuracy"]}


_WORKER_CONTEXT: tuple | None = None


def _worker_init(samples, model_config, train_config, num_bins, threshold):
    global _WORKER_CONTEXT
    _WORKER_CONTEXT = (samples, model_config, train_config, num_bins, threshold)


def _worker_job(args: tuple[tuple[bool, bool, bool], int]) -> dict[str, float]:
    triple, seed = args
    samples, mc, tc, num_bins, threshold = _WORKER_CONTEXT
    return _run_single(samples, mc, tc, triple, seed, num_bins, threshold)


def run_ablation(samples, model_config: ModelConfig, train_config: TrainConfig,
                 seeds, triples=DEFAULT_ABLATION_TRIPLES,
                 num_bins: int = DEFAULT_NUM_BINS,
                 threshold: float = DEFAULT_THRESHOLD,
                 max_workers: int = 1) -> list[AblationRow]:
    """Train and test each switch combination once per seed.

    Rows aggregate per-seed test metrics as mean and population standard
    deviation, in the given triple order.  `max_workers > 1` fans the
    independent (triple, seed) runs out to worker processes.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(tuple(triple), seed) for triple in triples for seed in seeds]
    if max_workers > 1:
        with ProcessPoolExecutor(
                max_workers=max_workers, initializer=_worker_init,
                initargs=(samples, model_config, train_config, num_bins, threshold),
        ) as pool:
            outcomes = list(pool.map(_worker_job, jobs))
    else:
        outcomes = [_run_single(samples, model_config, train_config, triple,
                                seed, num_bins, threshold)
                    for triple, seed in jobs]
    rows: list[AblationRow] = []
    per_seed = len(seeds)
    for t_idx, triple in enumerate(triples):
        chunk = outcomes[t_idx * per_seed:(t_idx + 1) * per_seed]
        means = {}
        sds = {}
        for key in METRIC_KEYS:
            vals = np.asarray([c[key] for c in chunk], dtype=np.float64)
            means[key] = float(vals.mean())
            sds[key] = float(vals.std())
        rows.append(AblationRow(use_binocular=triple[0], use_voting=triple[1],
                                use_metadata=triple[2], means=means, sds=sds,
                                seeds=list(seeds)))
    return rows


def write_ablation_csv(path, rows) -> None:
    header = ["B", "V", "M"]
    header += list(METRIC_KEYS)
    header += [f"{k}_sd" for k in METRIC_KEYS]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [str(int(row.use_binocular)), str(int(row.use_voting)),
                     str(int(row.use_metadata))]
            cells += [repr(row.means[k]) for k in METRIC_KEYS]
            cells += [repr(row.sds[k]) for k in METRIC_KEYS]
            fh.write(",".join(cells) + "\n")


def read_ablation_csv(path) -> list[AblationRow]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ConfigError(f"{path}: empty ablation csv")
    header = lines[0].split(",")
    expected = ["B", "V", "M"] + list(METRIC_KEYS) + [f"{k}_sd" for k in METRIC_KEYS]
    if header != expected:
        raise ConfigError(f"{path}: unexpected header {header}")
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(expected):
            raise ConfigError(f"{path}: row has {len(cells)} cells, "
                              f"expected {len(expected)}")
        flags = [bool(int(c)) for c in cells[:3]]
        vals = [float(c) for c in cells[3:]]
        means = dict(zip(METRIC_KEYS, vals[:len(METRIC_KEYS)]))
        sds = dict(zip(METRIC_KEYS, vals[len(METRIC_KEYS):]))
        rows.append(AblationRow(use_binocular=flags[0], use_voting=flags[1],
                                use_metadata=flags[2], means=means, sds=sds))
    return rows
