"""Stage-I contrastive pre-training and Stage-II supervised fine-tuning.

Both loops are deterministic given (config, seed, platform): model init is
seeded by the caller, augmentation draws come from one generator advanced
in batch order, and batch composition is seeded per epoch. Loss traces are
plain {step, loss, lr} records so two runs can be diffed byte for byte.

Gradient accumulation uses a two-pass scheme rather than microbatch loss
averaging: the contrastive objective couples every sample in the batch
through its negatives, so splitting the loss would change semantics. Pass
one embeds chunks without gradients, the full-batch loss is taken on the
cached embeddings, and pass two re-encodes each chunk backpropagating the
cached embedding gradients. Full-batch and chunked steps therefore agree
to float tolerance, which the tests pin.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .data import AugmentationConfig, augment, load_image, single_participant_batches
from .exceptions import (
    ConfigError,
    DataError,
    DivergenceError,
    InsufficientViewsError,
    MissingLabelError,
)
from .losses import EmbeddingBatch, LossConfig, angular_loss_batch, overall_loss
from .model import (
    Checkpoint,
    GazeClrModel,
    GazeEstimator,
    build_model_from_checkpoint,
    config_snapshot,
    pitch_yaw_to_vector_torch,
)
from .geometry import angular_error_deg_arrays, pitch_yaw_arrays_to_vectors, vector_to_pitch_yaw

log = logging.getLogger(__name__)

VARIANTS = ("equiv", "inv+equiv")

# Divergence guard: abort when the loss exceeds this or goes non-finite.
LOSS_ABORT_THRESHOLD = 1e4


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 0.0
    iterations: int = 50_000
    batch_size: int = 128
    tau: float = 0.1
    variant: str = "inv+equiv"
    seed: int = 0
    accumulation_chunks: int = 1
    # Stage II; values chosen for stable linear probing with the same
    # optimizer family as Stage I.
    ft_lr: float = 0.01
    ft_epochs: int = 30
    ft_batch_size: int = 64
    # the angular loss is degree-scaled, so early gradients are ~57x the
    # radian scale and can kill every hidden unit in one step; clipping
    # bounds that without touching the schedule. 0 disables.
    ft_grad_clip: float = 5.0

    def __post_init__(self):
        if self.lr <= 0 or self.ft_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        # 0 is allowed: a zero-iteration run returns the initialization,
        # which is the documented resume/no-op behavior.
        if self.iterations < 0 or self.ft_epochs < 0:
            raise ConfigError("iteration/epoch counts must be >= 0")
        if self.batch_size < 1 or self.ft_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.accumulation_chunks < 1:
            raise ConfigError("accumulation_chunks must be >= 1")
        if self.ft_grad_clip < 0:
            raise ConfigError("ft_grad_clip must be >= 0 (0 disables clipping)")

    @property
    def loss_config(self):
        return LossConfig(
            tau=self.tau,
            include_invariance=(self.variant == "inv+equiv"),
            include_equivariance=True,
        )


def cosine_lr(step, total_steps, lr0):
    """Half-cosine decay from lr0 at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        raise ConfigError(f"total_steps must be positive, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    trace: list
    stats: dict = field(default_factory=dict)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    trace: list
    estimator: object = None


# Images are written once by the generator and never mutated afterwards,
# so a process-wide cache keyed by path is sound. uint8 storage keeps the
# full desk-scale corpus around 140 MB.
@lru_cache(maxsize=32768)
def _cached_image_u8(path_str):
    return (load_image(Path(path_str)) * 255.0 + 0.5).astype(np.uint8)


def load_image_cached(path):
    return _cached_image_u8(str(path)).astype(np.float32) / 255.0


def clear_image_cache():
    _cached_image_u8.cache_clear()


def _group_records(manifest, key):
    return [manifest.groups[tuple(key)][view] for view in manifest.views]


def _batch_arrays(manifest, keys):
    """Raw images and per-sample effective rotations, one stack per view."""
    per_view_images = []
    per_view_rotations = []
    for v_idx, view in enumerate(manifest.views):
        images, rotations = [], []
        for key in keys:
            rec = manifest.groups[tuple(key)][view]
            images.append(load_image_cached(manifest.root / rec.image_path))
            rotations.append(rec.effective_rotation.m)
        per_view_images.append(images)
        per_view_rotations.append(np.stack(rotations))
    return per_view_images, per_view_rotations


def _augment_views(per_view_images, aug_cfg, draw, two_draws):
    """Augment per (group, view); second draws only for the Inv+Equiv variant."""
    n_groups = len(per_view_images[0])
    firsts = [[None] * n_groups for _ in per_view_images]
    seconds = [[None] * n_groups for _ in per_view_images] if two_draws else None
    for g in range(n_groups):
        for v, images in enumerate(per_view_images):
            firsts[v][g] = augment(images[g], aug_cfg, draw)
            if two_draws:
                seconds[v][g] = augment(images[g], aug_cfg, draw)
    stacks_a = [np.stack(column) for column in firsts]
    stacks_b = [np.stack(column) for column in seconds] if two_draws else None
    return stacks_a, stacks_b


def _embed(model, stacks_a, stacks_b, sl=slice(None)):
    """Encode + project one slice of the batch. Returns per-view lists."""
    chunk_a = np.concatenate([s[sl] for s in stacks_a], axis=0)
    n = chunk_a.shape[0] // len(stacks_a)
    feats_a = model.encode(chunk_a)
    z_hat_all = model.project_equivariant(feats_a)
    z_hat = list(torch.split(z_hat_all, n))
    z = zp = None
    if stacks_b is not None:
        chunk_b = np.concatenate([s[sl] for s in stacks_b], axis=0)
        feats_b = model.encode(chunk_b)
        z = list(torch.split(model.project_invariant(feats_a), n))
        zp = list(torch.split(model.project_invariant(feats_b), n))
    return z, zp, z_hat


def _batch_loss(batch_embeddings, rotations, loss_cfg, participant, view_ids):
    z, zp, z_hat = batch_embeddings
    batch = EmbeddingBatch(
        z=z, z_prime=zp, z_hat_per_view=z_hat, view_ids=view_ids, participant=participant
    )
    return overall_loss(batch, rotations=rotations, cfg=loss_cfg)


def _step_loss(model, stacks_a, stacks_b, rotations, loss_cfg, participant, view_ids, chunks):
    """Compute the batch loss and run backward. Returns the loss value."""
    n_groups = stacks_a[0].shape[0]
    if chunks <= 1 or chunks >= n_groups:
        loss = _batch_loss(
            _embed(model, stacks_a, stacks_b), rotations, loss_cfg, participant, view_ids
        )
        if loss.requires_grad:
            loss.backward()
        return loss.detach()

    bounds = np.linspace(0, n_groups, chunks + 1).astype(int)
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    # pass 1: cache embeddings without graphs
    cached = []
    with torch.no_grad():
        for sl in slices:
            cached.append(_embed(model, stacks_a, stacks_b, sl))

    def cat_views(idx):
        groups = [c[idx] for c in cached]
        if groups[0] is None:
            return None
        return [
            torch.cat([g[v] for g in groups]).detach().requires_grad_(True)
            for v in range(len(groups[0]))
        ]

    leaves = (cat_views(0), cat_views(1), cat_views(2))
    loss = _batch_loss(leaves, rotations, loss_cfg, participant, view_ids)
    loss.backward()

    # pass 2: re-encode each chunk with gradients, feed the cached grads
    for sl in slices:
        outputs, grads = [], []
        live = _embed(model, stacks_a, stacks_b, sl)
        for group, leaf_group in zip(live, leaves):
            if group is None:
                continue
            for v, out in enumerate(group):
                outputs.append(out)
                grads.append(leaf_group[v].grad[sl])
        torch.autograd.backward(outputs, grads)
    return loss.detach()


def _snapshot_state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def pretrain(manifest, model, cfg, aug_cfg=None, init_checkpoint=None):
    """Stage-I loop: single-participant batches, Eq.-style objective, SGD.

    Returns a PretrainResult whose stats record how many single- and
    multi-view pairs were formed; the Equiv variant must report zero
    single-view pairs.
    """
    aug_cfg = aug_cfg or AugmentationConfig()
    if len(manifest.views) < 2:
        raise InsufficientViewsError(
            f"pre-training needs >= 2 views, manifest has {len(manifest.views)}"
        )
    if model is None:
        model = GazeClrModel(seed=cfg.seed)
    if init_checkpoint is not None:
        model.load_state_dict(init_checkpoint.state["model"])

    torch.manual_seed(cfg.seed)
    draw = np.random.default_rng([cfg.seed, 5])
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    loss_cfg = cfg.loss_config
    two_draws = loss_cfg.include_invariance
    n_views = len(manifest.views)

    trace = []
    stats = {
        "single_view_pairs": 0,
        "multi_view_pairs": 0,
        "epochs_streamed": 0,
        "skipped_participants": {},
    }
    step = 0
    model.train()
    while step < cfg.iterations:
        stream = single_participant_batches(
            manifest, cfg.batch_size, seed=cfg.seed + stats["epochs_streamed"]
        )
        stats["epochs_streamed"] += 1
        stats["skipped_participants"] = dict(stream.skipped)
        saw_batch = False
        for keys in stream:
            if step >= cfg.iterations:
                break
            saw_batch = True
            per_view_images, rotations = _batch_arrays(manifest, keys)
            stacks_a, stacks_b = _augment_views(per_view_images, aug_cfg, draw, two_draws)
            participant = keys[0][0]
            lr = cosine_lr(step, cfg.iterations, cfg.lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            loss = _step_loss(
                model, stacks_a, stacks_b, rotations, loss_cfg, participant,
                list(manifest.views), cfg.accumulation_chunks,
            )
            loss_value = float(loss)
            if not math.isfinite(loss_value) or loss_value > LOSS_ABORT_THRESHOLD:
                raise DivergenceError(
                    f"loss diverged at step {step}: loss={loss_value!r}, lr={lr:.6g}, "
                    f"participant={participant}"
                )
            optimizer.step()
            trace.append({"step": step, "loss": loss_value, "lr": lr})
            stats["multi_view_pairs"] += len(keys) * n_views * (n_views - 1)
            if two_draws:
                stats["single_view_pairs"] += len(keys) * n_views
            step += 1
        if not saw_batch:
            raise DataError(
                f"batch size {cfg.batch_size} yields no batches "
                f"(skipped participants: {stats['skipped_participants']})"
            )

    snapshot = config_snapshot(
        model.encoder_cfg, model.head_cfg, extra={"train": asdict(cfg)}
    )
    checkpoint = Checkpoint(
        state={"model": _snapshot_state(model)}, config=snapshot, step=step
    )
    return PretrainResult(checkpoint=checkpoint, trace=trace, stats=stats)


def _labeled_rows(manifest, keys=None):
    """(image path, pitch/yaw, unit vector, pog, participant) per labeled frame."""
    rows = []
    for key in sorted(keys if keys is not None else manifest.group_keys()):
        for view in manifest.views:
            rec = manifest.groups[tuple(key)][view]
            if rec.gaze is None:
                continue
            pitch, yaw = vector_to_pitch_yaw(rec.gaze)
            rows.append(
                {
                    "path": manifest.root / rec.image_path,
                    "pitch_yaw": (pitch, yaw),
                    "vector": np.asarray(rec.gaze, dtype=np.float64),
                    "pog": rec.pog,
                    "participant": rec.participant,
                    "timestamp": rec.timestamp,
                    "view": view,
                }
            )
    return rows


@dataclass
class FeatureSet:
    features: np.ndarray
    pitch_yaw: np.ndarray
    vectors: np.ndarray
    pog: np.ndarray
    participants: list
    timestamps: np.ndarray
    views: list

    def __len__(self):
        return self.features.shape[0]

    def subset(self, mask):
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        return FeatureSet(
            features=self.features[idx],
            pitch_yaw=self.pitch_yaw[idx],
            vectors=self.vectors[idx],
            pog=self.pog[idx],
            participants=[self.participants[i] for i in idx],
            timestamps=self.timestamps[idx],
            views=[self.views[i] for i in idx],
        )


def extract_features(model, manifest, keys=None, chunk=256):
    """Frozen-encoder features plus labels for every labeled frame.

    Row order is (sorted group key, manifest view order); deterministic, so
    downstream sampling by index is reproducible. Missing PoG becomes NaN.
    """
    rows = _labeled_rows(manifest, keys)
    if not rows:
        raise MissingLabelError("manifest has no labeled frames")
    feats = []
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for start in range(0, len(rows), chunk):
            batch = np.stack([load_image_cached(r["path"]) for r in rows[start : start + chunk]])
            feats.append(model.encode(batch).cpu().numpy())
    if was_training:
        model.train()
    pog = np.stack(
        [
            r["pog"] if r["pog"] is not None else np.full(2, np.nan)
            for r in rows
        ]
    )
    return FeatureSet(
        features=np.concatenate(feats, axis=0).astype(np.float32),
        pitch_yaw=np.asarray([r["pitch_yaw"] for r in rows], dtype=np.float64),
        vectors=np.stack([r["vector"] for r in rows]),
        pog=pog,
        participants=[r["participant"] for r in rows],
        timestamps=np.asarray([r["timestamp"] for r in rows], dtype=np.int64),
        views=[r["view"] for r in rows],
    )


def _mean_angular_error(estimator, feature_set):
    with torch.no_grad():
        pred_py = estimator.regressor(torch.from_numpy(feature_set.features))
    pred = pitch_yaw_arrays_to_vectors(
        pred_py[:, 0].numpy().astype(np.float64), pred_py[:, 1].numpy().astype(np.float64)
    )
    return float(np.mean(angular_error_deg_arrays(pred, feature_set.vectors)))


def finetune(manifest, checkpoint, mode, cfg, estimator=None, val_manifest=None):
    """Stage-II supervised training on angular loss.

    mode "frozen" trains only the regressor on precomputed features (the
    linear-probing protocol); "full" backpropagates into the encoder.
    """
    if mode not in ("frozen", "full"):
        raise ConfigError(f"mode must be 'frozen' or 'full', got {mode!r}")
    if estimator is None:
        if checkpoint is None:
            raise ConfigError("finetune needs a checkpoint or an estimator")
        stage1 = build_model_from_checkpoint(checkpoint)
        torch.manual_seed(cfg.seed)
        estimator = GazeEstimator(stage1.encoder, stage1.encoder_cfg)

    rows = _labeled_rows(manifest)
    if not rows:
        raise MissingLabelError("fine-tuning needs gaze labels; manifest has none")

    if mode == "frozen":
        estimator.encoder.requires_grad_(False)
        # whole-module eval keeps any norm-layer statistics frozen too
        estimator.eval()
        params = list(estimator.regressor.parameters())
    else:
        estimator.train()
        params = list(estimator.parameters())

    train_features = extract_features(estimator, manifest) if mode == "frozen" else None
    frozen_val = (
        extract_features(estimator, val_manifest)
        if val_manifest is not None and mode == "frozen"
        else None
    )

    targets = torch.from_numpy(
        np.stack([r["vector"] for r in rows]).astype(np.float32)
    )
    optimizer = torch.optim.SGD(params, lr=cfg.ft_lr, momentum=cfg.momentum)
    trace = []
    n = len(rows)
    for epoch in range(cfg.ft_epochs):
        lr = cosine_lr(epoch, cfg.ft_epochs, cfg.ft_lr)
        for group in optimizer.param_groups:
            group["lr"] = lr
        perm = np.random.default_rng([cfg.seed, 11, epoch]).permutation(n)
        losses = []
        for start in range(0, n, cfg.ft_batch_size):
            idx = perm[start : start + cfg.ft_batch_size]
            if mode == "frozen":
                feats = torch.from_numpy(train_features.features[idx])
            else:
                batch = np.stack([load_image_cached(rows[i]["path"]) for i in idx])
                feats = estimator.encode(batch)
            pred = estimator.regress_gaze(feats)
            loss = angular_loss_batch(pred, targets[idx]).mean()
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.ft_grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, cfg.ft_grad_clip)
            optimizer.step()
            losses.append(float(loss.detach()))
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        if val_manifest is not None:
            # full mode moves the encoder, so features must be re-extracted
            val_features = frozen_val if mode == "frozen" else extract_features(estimator, val_manifest)
            entry["val_mae"] = _mean_angular_error(estimator, val_features)
        trace.append(entry)

    snapshot = {
        "encoder": asdict(estimator.encoder_cfg),
        "mode": mode,
        "train": asdict(cfg),
    }
    ckpt = Checkpoint(
        state={"estimator": _snapshot_state(estimator)}, config=snapshot, step=cfg.ft_epochs
    )
    return FinetuneResult(checkpoint=ckpt, trace=trace, estimator=estimator)


def write_trace(trace, path):
    """Newline-delimited {step, loss, lr} records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for entry in trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return path


def read_trace(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"trace file missing: {path}")
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path} line {line_no}: malformed trace record: {exc}") from exc
    return entries
