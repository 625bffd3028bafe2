"""Full binocular voting model: shared per-eye encoder, bidirectional
cross-attention fusion, CLS concatenation, and the three task heads.

The glaucoma head is stochastic: it keeps dropout enabled at inference and
is sampled `num_votes` times per input ("votes"); their mean is the
predicted probability and their spread is the uncertainty estimate.  The
backbone is evaluated once per forward pass regardless of the vote count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .tensor import (ConfigError, Rng, Tensor, concat, exp, layer_norm, log,
                     matmul, reshape, sigmoid, subtract, tmean)


@dataclass
class ModelConfig:
    """Architecture and loss-weight settings, including the ablation switches.

    `use_binocular` gates the fellow-eye stream and the fusion blocks,
    `use_voting` gates the multi-vote stochastic head (off: one pass,
    dropout only during training, variance penalty disabled), and
    `use_metadata` gates the age/sex heads and their loss terms.
    """

    num_cross_blocks: int = 3
    num_votes: int = 16
    head_dropout: float = 0.3
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    encoder_blocks: int = 2
    backbone_dropout: float = 0.1
    head_hidden: int = 32
    patch_size: int = 8
    image_channels: int = 1
    image_size: int = 32
    lambda_age: float = 0.1
    lambda_sex: float = 0.1
    lambda_reg: float = 1.0
    lambda_wd: float = 1e-4
    use_binocular: bool = True
    use_voting: bool = True
    use_metadata: bool = True

    def validate(self) -> None:
        if self.num_cross_blocks < 1:
            raise ConfigError("num_cross_blocks must be >= 1")
        if self.num_votes < 1:
            raise ConfigError("num_votes must be >= 1")
        if not 0.0 <= self.head_dropout < 1.0:
            raise ConfigError(f"head_dropout must be in [0, 1), got {self.head_dropout}")
        for name in ("model_dim", "num_heads", "ffn_dim", "encoder_blocks",
                     "head_hidden", "patch_size", "image_channels", "image_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_age", "lambda_sex", "lambda_reg", "lambda_wd"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_channels, self.image_size, self.image_size)

    @property
    def z_dim(self) -> int:
        return 2 * self.model_dim if self.use_binocular else self.model_dim


def config_to_kv(config: ModelConfig) -> dict[str, str]:
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        out[f.name] = str(v).lower() if isinstance(v, bool) else repr(v)
    return out


def config_from_kv(kv: dict[str, str], base: ModelConfig | None = None) -> ModelConfig:
    cfg = base or ModelConfig()
    known = {f.name: f.type for f in fields(cfg)}
    for key, raw in kv.items():
        if key not in known:
            raise ConfigError(f"unknown model config key '{key}'")
        current = getattr(cfg, key)
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false"):
                raise ConfigError(f"config key '{key}' expects true/false, got '{raw}'")
            value = raw.lower() == "true"
        else:
            try:
                value = int(raw) if isinstance(current, int) else float(raw)
            except ValueError:
                raise ConfigError(f"config key '{key}' expects a number, "
                                  f"got '{raw}'") from None
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


@dataclass
class VoteBundle:
    """The stochastic head's predictions for one input.

    `votes` is a length-n tensor of sigmoid outputs in (0, 1); `mean` and
    `variance` (population) are graph nodes over the votes so losses can
    differentiate through them.
    """

    votes: Tensor
    mean: Tensor
    variance: Tensor

    @property
    def n(self) -> int:
        return self.votes.shape[0]

    @property
    def values(self) -> list[float]:
        return self.votes.data.tolist()


@dataclass
class FusedRepresentation:
    """Concatenated CLS summary plus the fusion attention maps.

    `attention[(eye, block)]` holds the weights of the cross-attention
    direction whose key/value tokens come from `eye`'s sequence, i.e. the
    attention *over* that eye's patches; shape [num_heads, Tq, Tk].
    """

    z: Tensor
    attention: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)


@dataclass
class ModelOutput:
    vote_bundle: VoteBundle
    age_pred: Tensor | None
    sex_logits: Tensor | None
    representation: FusedRepresentation


@dataclass
class BatchOutput:
    """Vectorized forward results for a whole minibatch.

    Semantically identical to running `forward` per sample (modulo which
    dropout mask each sample draws): `votes` is [b, n], `mean`/`variance`
    are per-sample [b], `age_pred` is [b], `sex_logits` is [b, 2].
    """

    votes: Tensor
    mean: Tensor
    variance: Tensor
    age_pred: Tensor | None
    sex_logits: Tensor | None
    z: Tensor


def vote(z: Tensor, glaucoma_head: nn.MlpHead, n: int, rng: Rng,
         dropout_active: bool = True) -> VoteBundle:
    """Sample n stochastic head passes on a shared representation.

    The n passes run as one batched evaluation with independent dropout
    masks per row, which is equivalent to n sequential passes and keeps
    the backbone cost out of the vote loop entirely.
    """
    if n < 1:
        raise ConfigError(f"vote count must be >= 1, got {n}")
    tiled = matmul(Tensor(np.ones((n, 1))), reshape(z, (1, z.shape[-1])))
    raw = nn.mlp_head_forward(tiled, glaucoma_head, rng, dropout_active)
    votes = sigmoid(reshape(raw, (n,)))
    mean = tmean(votes)
    dev = subtract(votes, mean)
    variance = tmean(dev * dev)
    return VoteBundle(votes=votes, mean=mean, variance=variance)


def vote_batch(z: Tensor, glaucoma_head: nn.MlpHead, n: int, rng: Rng,
               dropout_active: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Batched `vote`: z is [b, zd]; returns (votes [b, n], mean [b],
    variance [b]) with independent dropout masks for every (sample, vote)."""
    if n < 1:
        raise ConfigError(f"vote count must be >= 1, got {n}")
    b, zd = z.shape
    tiled = matmul(Tensor(np.ones((n, 1))), reshape(z, (b, 1, zd)))   # [b, n, zd]
    raw = nn.mlp_head_forward(tiled, glaucoma_head, rng, dropout_active)
    votes = sigmoid(reshape(raw, (b, n)))
    mean = tmean(votes, axis=-1)
    mean_tiled = reshape(matmul(reshape(mean, (b, 1, 1)), Tensor(np.ones((1, n)))),
                         (b, n))
    dev = subtract(votes, mean_tiled)
    variance = tmean(dev * dev, axis=-1)
    return votes, mean, variance


def predict_probability(bundle: VoteBundle) -> float:
    """The model's probability estimate: the mean of the votes."""
    return bundle.mean.item()


def attention_map(output: ModelOutput, block_index: int, eye: str) -> Tensor:
    """CLS-row fusion attention over one eye's patch grid, head-averaged.

    `eye` selects whose patches the map covers: "target" reads the
    fusion direction attending over target-eye tokens.  The weight on the
    context CLS token is excluded, so the grid sums to <= 1.
    """
    if eye not in ("target", "fellow"):
        raise ConfigError(f"eye must be 'target' or 'fellow', got '{eye}'")
    attn = output.representation.attention
    if not attn:
        raise ConfigError("no fusion attention recorded (monocular forward)")
    key = (eye, block_index)
    if key not in attn:
        blocks = sorted({b for _, b in attn})
        raise ConfigError(f"block index {block_index} out of range; have {blocks}")
    weights = attn[key]                       # [heads, Tq, Tk]
    cls_row = weights[:, 0, 1:].mean(axis=0)  # attention over patch tokens
    grid = math.isqrt(cls_row.shape[0])
    if grid * grid != cls_row.shape[0]:
        raise ConfigError(f"patch count {cls_row.shape[0]} is not a square grid")
    return Tensor(cls_row.reshape(grid, grid))


class VotingVit:
    """Binocular encoder + fusion + voting/metadata heads.

    The patch encoder and self-attention stack are shared between the two
    eyes; fusion runs both cross-attention directions in parallel from
    the same inputs at every depth.  `age_mean`/`age_std` hold the affine
    used to standardize the age regression target.
    """

    def __init__(self, config: ModelConfig, rng: Rng):
        config.validate()
        self.config = config
        self.embed = nn.PatchEmbed(rng.child("embed"), config.image_shape,
                                   config.patch_size, config.model_dim)
        self.encoder = [
            nn.AttentionBlock(rng.child("encoder", i), config.model_dim,
                              config.num_heads, config.ffn_dim, config.backbone_dropout)
            for i in range(config.encoder_blocks)
        ]
        if config.use_binocular:
            self.cross_from_target = [
                nn.AttentionBlock(rng.child("cross_from_target", i), config.model_dim,
                                  config.num_heads, config.ffn_dim, config.backbone_dropout)
                for i in range(config.num_cross_blocks)
            ]
            self.cross_from_fellow = [
                nn.AttentionBlock(rng.child("cross_from_fellow", i), config.model_dim,
                                  config.num_heads, config.ffn_dim, config.backbone_dropout)
                for i in range(config.num_cross_blocks)
            ]
        else:
            self.cross_from_target = []
            self.cross_from_fellow = []
        # final pre-head norm keeps z at unit scale; without it the
        # residual stream magnitude saturates the vote sigmoid at init
        self.final_norm_gain = Tensor(np.ones(config.z_dim), requires_grad=True)
        self.final_norm_bias = Tensor(np.zeros(config.z_dim), requires_grad=True)
        self.glaucoma_head = nn.MlpHead(rng.child("glaucoma_head"),
                                        [config.z_dim, config.head_hidden, 1],
                                        config.head_dropout)
        if config.use_metadata:
            self.age_head = nn.MlpHead(rng.child("age_head"),
                                       [config.z_dim, config.head_hidden, 1], 0.0)
            self.sex_head = nn.MlpHead(rng.child("sex_head"),
                                       [config.z_dim, config.head_hidden, 2], 0.0)
        else:
            self.age_head = None
            self.sex_head = None
        self.age_mean = 0.0
        self.age_std = 1.0
        # running mean/std of z across training batches (not learned weights);
        # freeze_stats pins them once the backbone has largely stopped moving
        self.z_center = np.zeros(config.z_dim)
        self.z_scale = np.ones(config.z_dim)
        self._z_center_ready = False
        self.freeze_stats = False

    # -- parameter registry --------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: list[tuple[str, Tensor]] = []
        out.extend(self.embed.named_parameters("embed"))
        for i, blk in enumerate(self.encoder):
            out.extend(blk.named_parameters(f"encoder.{i}"))
        for i, blk in enumerate(self.cross_from_target):
            out.extend(blk.named_parameters(f"cross_from_target.{i}"))
        for i, blk in enumerate(self.cross_from_fellow):
            out.extend(blk.named_parameters(f"cross_from_fellow.{i}"))
        out.append(("final_norm_gain", self.final_norm_gain))
        out.append(("final_norm_bias", self.final_norm_bias))
        out.extend(self.glaucoma_head.named_parameters("glaucoma_head"))
        if self.age_head is not None:
            out.extend(self.age_head.named_parameters("age_head"))
        if self.sex_head is not None:
            out.extend(self.sex_head.named_parameters("sex_head"))
        return dict(out)

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_output_bias(self, positive_rate: float) -> None:
        """Start the vote head at the label base rate instead of 0.5.

        Skipping the early transient where the bias walks to the base
        rate keeps that walk from dragging the other head weights along.
        """
        rate = min(max(positive_rate, 1e-6), 1.0 - 1e-6)
        self.glaucoma_head.layers[-1].bias.data[0] = math.log(rate / (1.0 - rate))

    # -- forward pass ---------------------------------------------------

    def _final_norm(self, z: Tensor) -> Tensor:
        return layer_norm(z, self.final_norm_gain, self.final_norm_bias,
                          nn.LAYER_NORM_EPS)

    def _center(self, z: Tensor, train: bool) -> Tensor:
        """Batch-normalise z per feature (no learned affine part).

        The layer norm leaves z with a large constant component shared by
        every sample, while the part that actually varies between samples
        has a tiny scale.  Normalising per feature lets the heads reach a
        useful output spread without having to grow huge weights.  The
        batch statistics stay inside the graph during batched training:
        with constants instead, every backbone weight's effect on the
        heads is amplified by the inverse feature scale and a single
        optimiser step can throw the output into saturation.  Inference
        and single-sample passes use the running statistics.
        """
        if train and z.ndim == 2 and z.shape[0] > 1:
            mu = tmean(z, axis=0)
            dev = z - mu
            var = tmean(dev * dev, axis=0)
            out = dev * exp(-0.5 * log(var + 1e-8))
            if not self.freeze_stats:
                batch_std = np.sqrt(var.data)
                # floor relative to the typical feature so a near-constant
                # dim is never amplified into a dominant noise channel
                rms = math.sqrt(float(np.mean(batch_std ** 2))) or 1.0
                batch_std = np.maximum(batch_std, 0.2 * rms)
                if self._z_center_ready:
                    self.z_center = 0.9 * self.z_center + 0.1 * mu.data
                    self.z_scale = 0.9 * self.z_scale + 0.1 * batch_std
                else:
                    self.z_center = mu.data.copy()
                    self.z_scale = batch_std.copy()
                    self._z_center_ready = True
            return out
        return (z - Tensor(self.z_center)) * Tensor(1.0 / self.z_scale)

    def _encode_one(self, image: Tensor, rng: Rng, train: bool) -> Tensor:
        seq = self.embed(image)
        for i, blk in enumerate(self.encoder):
            seq, _ = nn.self_attention(seq, blk, rng.child("block", i), train)
        return seq

    def encode(self, target_img: Tensor, fellow_img: Tensor | None,
               rng: Rng, train: bool) -> FusedRepresentation:
        """Run the backbone once; returns z and the fusion attention maps."""
        cfg = self.config
        if target_img.shape != cfg.image_shape:
            raise ConfigError(f"target image must have shape {cfg.image_shape}, "
                              f"got {target_img.shape}")
        if not cfg.use_binocular:
            seq = self._encode_one(target_img, rng.child("target"), train)
            return FusedRepresentation(z=self._center(self._final_norm(seq[0]), train))
        if fellow_img is None:
            raise ConfigError("fellow image required when use_binocular=true")
        if fellow_img.shape != cfg.image_shape:
            raise ConfigError(f"fellow image must have shape {cfg.image_shape}, "
                              f"got {fellow_img.shape}")
        t = self._encode_one(target_img, rng.child("target"), train)
        f = self._encode_one(fellow_img, rng.child("fellow"), train)
        attention: dict[tuple[str, int], np.ndarray] = {}
        for i in range(cfg.num_cross_blocks):
            t_next, over_fellow = nn.cross_attention(
                t, f, self.cross_from_target[i], rng.child("fuse_t", i), train)
            f_next, over_target = nn.cross_attention(
                f, t, self.cross_from_fellow[i], rng.child("fuse_f", i), train)
            attention[("fellow", i)] = over_fellow.data
            attention[("target", i)] = over_target.data
            t, f = t_next, f_next
        z = self._center(self._final_norm(concat([t[0], f[0]], axis=0)), train)
        return FusedRepresentation(z=z, attention=attention)

    def forward(self, target_img: Tensor, fellow_img: Tensor | None,
                rng: Rng, train: bool, vote_rng: Rng | None = None) -> ModelOutput:
        """Backbone once, then heads.  The voting head draws its dropout
        masks from `vote_rng` (derived from `rng` by default), so vote
        randomness never perturbs the encoder activations."""
        cfg = self.config
        rep = self.encode(target_img, fellow_img, rng.child("backbone"), train)
        if vote_rng is None:
            vote_rng = rng.child("vote")
        if cfg.use_voting:
            bundle = vote(rep.z, self.glaucoma_head, cfg.num_votes, vote_rng,
                          dropout_active=True)
        else:
            bundle = vote(rep.z, self.glaucoma_head, 1, vote_rng,
                          dropout_active=train)
        age_pred = None
        sex_logits = None
        if cfg.use_metadata:
            head_rng = rng.child("metadata")
            age_pred = nn.mlp_head_forward(rep.z, self.age_head, head_rng, False)[0]
            sex_logits = nn.mlp_head_forward(rep.z, self.sex_head, head_rng, False)
        return ModelOutput(vote_bundle=bundle, age_pred=age_pred,
                           sex_logits=sex_logits, representation=rep)

    # -- batched forward (training fast path) ---------------------------

    def encode_batch(self, targets: Tensor, fellows: Tensor | None,
                     rng: Rng, train: bool) -> Tensor:
        """Backbone over a whole minibatch; returns z [b, z_dim].

        Both eyes run through the shared encoder as one stacked batch.
        Fusion attention maps are not recorded on this path; use
        `encode`/`forward` for a single sample when maps are needed.
        """
        cfg = self.config
        if targets.ndim != 4 or targets.shape[1:] != cfg.image_shape:
            raise ConfigError(f"batched targets must be (b,) + {cfg.image_shape}, "
                              f"got {targets.shape}")
        if not cfg.use_binocular:
            seq = self.embed(targets)
            for i, blk in enumerate(self.encoder):
                seq, _ = nn.self_attention(seq, blk, rng.child("enc", i), train)
            return self._center(self._final_norm(seq[:, 0]), train)
        if fellows is None:
            raise ConfigError("fellow images required when use_binocular=true")
        if fellows.shape != targets.shape:
            raise ConfigError(f"fellow batch shape {fellows.shape} != "
                              f"target batch shape {targets.shape}")
        b = targets.shape[0]
        both = concat([targets, fellows], axis=0)
        seq = self.embed(both)
        for i, blk in enumerate(self.encoder):
            seq, _ = nn.self_attention(seq, blk, rng.child("enc", i), train)
        t = seq[:b]
        f = seq[b:]
        for i in range(cfg.num_cross_blocks):
            t_next, _ = nn.cross_attention(t, f, self.cross_from_target[i],
                                           rng.child("fuse_t", i), train)
            f_next, _ = nn.cross_attention(f, t, self.cross_from_fellow[i],
                                           rng.child("fuse_f", i), train)
            t, f = t_next, f_next
        return self._center(self._final_norm(concat([t[:, 0], f[:, 0]], axis=-1)),
                            train)

    def forward_batch(self, targets: Tensor, fellows: Tensor | None,
                      rng: Rng, train: bool,
                      vote_rng: Rng | None = None) -> BatchOutput:
        cfg = self.config
        z = self.encode_batch(targets, fellows, rng.child("backbone"), train)
        if vote_rng is None:
            vote_rng = rng.child("vote")
        if cfg.use_voting:
            votes, mean, variance = vote_batch(z, self.glaucoma_head,
                                               cfg.num_votes, vote_rng, True)
        else:
            votes, mean, variance = vote_batch(z, self.glaucoma_head, 1,
                                               vote_rng, train)
        age_pred = None
        sex_logits = None
        if cfg.use_metadata:
            head_rng = rng.child("metadata")
            b = z.shape[0]
            age_pred = reshape(nn.mlp_head_forward(z, self.age_head, head_rng,
                                                   False), (b,))
            sex_logits = nn.mlp_head_forward(z, self.sex_head, head_rng, False)
        return BatchOutput(votes=votes, mean=mean, variance=variance,
                           age_pred=age_pred, sex_logits=sex_logits, z=z)

    # -- persistence ----------------------------------------------------

    def save(self, path) -> None:
        extra = {
            "config": config_to_kv(self.config),
            "age_mean": self.age_mean,
            "age_std": self.age_std,
            "z_center": self.z_center.tolist(),
            "z_scale": self.z_scale.tolist(),
            "z_center_ready": self._z_center_ready,
        }
        nn.save_checkpoint(path, self.named_parameters(), extra)

    @classmethod
    def load(cls, path) -> "VotingVit":
        stored, extra = nn.load_checkpoint(path)
        if "config" not in extra:
            raise ConfigError(f"{path} does not embed a model config")
        config = config_from_kv(extra["config"])
        model = cls(config, Rng(0))
        nn.restore_parameters(model.named_parameters(), stored)
        model.age_mean = float(extra.get("age_mean", 0.0))
        model.age_std = float(extra.get("age_std", 1.0))
        for attr in ("z_center", "z_scale"):
            stat = extra.get(attr)
            if stat is None:
                continue
            stat = np.asarray(stat, dtype=np.float64)
            if stat.shape != (config.z_dim,):
                raise ConfigError(f"{attr} length {stat.shape} does not "
                                  f"match z_dim {config.z_dim}")
            setattr(model, attr, stat)
        model._z_center_ready = bool(extra.get("z_center_ready", False))
        return model
