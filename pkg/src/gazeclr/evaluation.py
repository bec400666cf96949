"""Evaluation protocols: frozen probing, few-shot calibration, diagnostics.

All protocols share three rules:
  - features are extracted once per subject and reused across runs;
  - the per-run calibration/evaluation index split is disjoint, and the
    evaluation side never contains calibration samples of the same run;
  - randomness is keyed as default_rng([seed, subject_index, run]), so a
    report is exactly reproducible from (seed, k) and adding subjects or
    runs never perturbs existing streams.
"""

import copy
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import subset_manifest
from .exceptions import (
    ConfigError,
    DataError,
    InvariantViolationError,
)
from .geometry import angular_error_deg_arrays, pitch_yaw_arrays_to_vectors
from .model import Checkpoint, build_model_from_checkpoint, rotate_embedding
from .training import TrainConfig, extract_features, finetune

# Table 2 y Figure 3 shot settings, merged
SHOT_GRID = (1, 3, 5, 9, 15, 20, 50, 64)

RIDGE_LAMBDA = 1e-4

DEFAULT_RUNS = 10


@dataclass
class EvalReport:
    """Per-subject per-run angular errors plus their flat aggregate.

    mean/std are over the flat (subject, run) value list; std is the
    population standard deviation.
    """

    protocol: str
    k: int
    runs: int
    seed: int
    per_subject: dict
    mean: float
    std: float
    excluded_subjects: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        values = self.flat_values()
        if not values:
            raise DataError("report holds no per-subject values")
        if abs(self.mean - float(np.mean(values))) > 1e-9:
            raise InvariantViolationError(
                f"aggregate mean {self.mean} disagrees with stored values "
                f"(expected {float(np.mean(values))})"
            )

    def flat_values(self):
        return [v for runs in self.per_subject.values() for v in runs]

    @classmethod
    def build(cls, protocol, k, runs, seed, per_subject, excluded=None, notes=None):
        values = [v for r in per_subject.values() for v in r]
        if not values:
            raise DataError(f"{protocol}: no subject produced results")
        return cls(
            protocol=protocol,
            k=k,
            runs=runs,
            seed=seed,
            per_subject={s: [float(v) for v in r] for s, r in per_subject.items()},
            mean=float(np.mean(values)),
            std=float(np.std(values)),
            excluded_subjects=list(excluded or []),
            notes=dict(notes or {}),
        )

    def to_dict(self):
        return {
            "protocol": self.protocol,
            "k": self.k,
            "runs": self.runs,
            "seed": self.seed,
            "per_subject": self.per_subject,
            "mean": self.mean,
            "std": self.std,
            "excluded_subjects": self.excluded_subjects,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(**obj)


def save_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    return path


def load_report(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"report file missing: {path}")
    with open(path) as fh:
        obj = json.load(fh)
    try:
        return EvalReport.from_dict(obj)
    except TypeError as exc:
        raise DataError(f"{path}: not an evaluation report: {exc}") from exc


def _resolve_model(model_or_checkpoint):
    if isinstance(model_or_checkpoint, Checkpoint):
        model = build_model_from_checkpoint(model_or_checkpoint)
        model.eval()
        return model
    if hasattr(model_or_checkpoint, "encode"):
        return model_or_checkpoint
    raise ConfigError(
        f"expected a Checkpoint or a model with .encode, got {type(model_or_checkpoint)!r}"
    )


def _fit_linear(features, targets, ridge_lambda):
    """Closed-form (ridge) least squares with a bias column."""
    a = np.concatenate(
        [features.astype(np.float64), np.ones((features.shape[0], 1))], axis=1
    )
    y = targets.astype(np.float64)
    if ridge_lambda == 0.0:
        weights, *_ = np.linalg.lstsq(a, y, rcond=None)
        return weights
    gram = a.T @ a + ridge_lambda * np.eye(a.shape[1])
    return np.linalg.solve(gram, a.T @ y)


def _apply_linear(weights, features):
    a = np.concatenate(
        [features.astype(np.float64), np.ones((features.shape[0], 1))], axis=1
    )
    return a @ weights


def _mae_degrees(pred_pitch_yaw, true_vectors):
    pred = pitch_yaw_arrays_to_vectors(pred_pitch_yaw[:, 0], pred_pitch_yaw[:, 1])
    return float(np.mean(angular_error_deg_arrays(pred, true_vectors)))


def _split_indices(n, k, rng):
    """Disjoint calibration/evaluation split covering all n samples."""
    perm = rng.permutation(n)
    return perm[:k], perm[k:]


def eval_llt(
    checkpoint,
    target_manifest,
    k,
    runs=DEFAULT_RUNS,
    seed=0,
    ridge_lambda=RIDGE_LAMBDA,
    features=None,
):
    """Linear Layer Training: frozen features, per-subject k-shot linear fit.

    Per subject and run, k calibration samples train a closed-form linear
    map to pitch/yaw; MAE is measured on that subject's remaining samples.
    Subjects without more than k samples are excluded with a warning.
    ``features`` takes a precomputed FeatureSet (cached pipelines, test
    doubles); otherwise the checkpoint's encoder is applied to the manifest.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if runs < 1:
        raise ConfigError(f"runs must be >= 1, got {runs}")
    if features is None:
        model = _resolve_model(checkpoint)
        features = extract_features(model, target_manifest)
    subjects = sorted(set(features.participants))
    participants = np.asarray(features.participants)

    per_subject = {}
    excluded = []
    for s_idx, subject in enumerate(subjects):
        sub = features.subset(participants == subject)
        if len(sub) <= k:
            warnings.warn(
                f"subject {subject!r} has {len(sub)} samples <= k={k}; excluded from LLT"
            )
            excluded.append(subject)
            continue
        maes = []
        for run in range(runs):
            rng = np.random.default_rng([seed, s_idx, run])
            cal, holdout = _split_indices(len(sub), k, rng)
            weights = _fit_linear(sub.features[cal], sub.pitch_yaw[cal], ridge_lambda)
            pred = _apply_linear(weights, sub.features[holdout])
            maes.append(_mae_degrees(pred, sub.vectors[holdout]))
        per_subject[subject] = maes
    if not per_subject:
        raise DataError(f"every subject has <= k={k} samples")
    return EvalReport.build(
        "llt", k=k, runs=runs, seed=seed, per_subject=per_subject,
        excluded=excluded, notes={"ridge_lambda": ridge_lambda},
    )


def _predict_pitch_yaw(estimator, feature_matrix):
    with torch.no_grad():
        py = estimator.regressor(torch.from_numpy(feature_matrix))
    return py.numpy().astype(np.float64)


def eval_finetune_bias(
    checkpoint,
    target_manifest,
    k,
    runs=DEFAULT_RUNS,
    seed=0,
    cfg=None,
    mode="full",
    estimator_factory=None,
):
    """Few-shot fine-tuning with a subject-dependent bias.

    Leave-one-subject-out: the estimator is fine-tuned on the remaining
    subjects, then the held-out subject's constant pitch/yaw bias is
    estimated as the mean residual over k calibration samples and added
    to predictions on the rest. k = 0 keeps the bias at zero, so the
    protocol degrades to plain fine-tuned evaluation.

    Per-subject bias terms of the training folds are handled as the
    closed-form residual means they converge to, not as jointly-trained
    parameters; on synthetic data fold biases are zero by construction.
    """
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    cfg = cfg or TrainConfig(seed=seed)
    subjects = sorted(target_manifest.participants)
    if len(subjects) < 2:
        raise DataError("finetune-bias protocol needs >= 2 subjects for its folds")

    per_subject = {}
    excluded = []
    bias_estimates = {}
    for s_idx, subject in enumerate(subjects):
        train_fold = subset_manifest(
            target_manifest, participants=[s for s in subjects if s != subject]
        )
        if estimator_factory is not None:
            fold_estimator = estimator_factory(subject)
            result = finetune(train_fold, None, mode, cfg, estimator=fold_estimator)
        else:
            result = finetune(train_fold, checkpoint, mode, cfg)
        estimator = result.estimator
        estimator.eval()
        held = extract_features(
            estimator, target_manifest, keys=target_manifest.group_keys(subject)
        )
        if len(held) <= k:
            warnings.warn(
                f"subject {subject!r} has {len(held)} samples <= k={k}; excluded"
            )
            excluded.append(subject)
            continue
        pred_all = _predict_pitch_yaw(estimator, held.features)
        maes = []
        run_biases = []
        for run in range(runs):
            rng = np.random.default_rng([seed, s_idx, run])
            cal, holdout = _split_indices(len(held), k, rng)
            if k > 0:
                bias = np.mean(held.pitch_yaw[cal] - pred_all[cal], axis=0)
            else:
                bias = np.zeros(2)
            run_biases.append(bias)
            maes.append(_mae_degrees(pred_all[holdout] + bias, held.vectors[holdout]))
        per_subject[subject] = maes
        bias_estimates[subject] = np.stack(run_biases).mean(axis=0).tolist()
    if not per_subject:
        raise DataError(f"every subject has <= k={k} samples")
    return EvalReport.build(
        "ft", k=k, runs=runs, seed=seed, per_subject=per_subject,
        excluded=excluded, notes={"mode": mode, "bias_estimates": bias_estimates},
    )


def eval_within(
    checkpoint,
    train_manifest,
    val_manifest,
    fractions=(1.0,),
    seed=0,
    cfg=None,
    estimator=None,
):
    """Within-dataset frozen probing over a label-fraction grid.

    For each fraction, that share of every training subject's groups is
    sampled, a frozen-encoder regressor is trained on it, and MAE is
    reported per held-out validation subject. per_subject rows are indexed
    by fraction (one entry per grid point, in grid order).
    """
    fractions = tuple(fractions)
    if not fractions:
        raise DataError("fraction grid is empty")
    for f in fractions:
        if not 0 < f <= 1:
            raise ConfigError(f"fractions must be in (0, 1], got {f}")
    cfg = cfg or TrainConfig(seed=seed)

    per_subject = {s: [] for s in sorted(val_manifest.participants)}
    for f_idx, fraction in enumerate(fractions):
        rng = np.random.default_rng([seed, 13, f_idx])
        keys = []
        for participant in sorted(train_manifest.participants):
            p_keys = sorted(train_manifest.group_keys(participant))
            n_take = max(1, round(fraction * len(p_keys)))
            chosen = rng.choice(len(p_keys), size=n_take, replace=False)
            keys.extend(p_keys[i] for i in sorted(chosen))
        fold = subset_manifest(train_manifest, keys=keys)
        if estimator is not None:
            result = finetune(fold, None, "frozen", cfg, estimator=copy.deepcopy(estimator))
        else:
            result = finetune(fold, checkpoint, "frozen", cfg)
        trained = result.estimator
        trained.eval()
        for subject in per_subject:
            held = extract_features(
                trained, val_manifest, keys=val_manifest.group_keys(subject)
            )
            pred = _predict_pitch_yaw(trained, held.features)
            per_subject[subject].append(_mae_degrees(pred, held.vectors))
    return EvalReport.build(
        "within", k=0, runs=len(fractions), seed=seed, per_subject=per_subject,
        notes={"fractions": list(fractions)},
    )


@dataclass
class DiagnosticsBundle:
    """Raw data behind the embedding figures; plotting renders from this."""

    mode: str
    projection: np.ndarray
    projection_participants: list
    projection_views: list
    projection_pog: np.ndarray
    same_timestamp_distance: float
    mismatched_distance: float
    correlation: object
    pair_distances: np.ndarray
    notes: list = field(default_factory=list)

    @property
    def degenerate(self):
        return self.correlation is None


def save_diagnostics(bundle, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    obj = {
        "mode": bundle.mode,
        "projection": bundle.projection.tolist(),
        "projection_participants": bundle.projection_participants,
        "projection_views": bundle.projection_views,
        "projection_pog": bundle.projection_pog.tolist(),
        "same_timestamp_distance": bundle.same_timestamp_distance,
        "mismatched_distance": bundle.mismatched_distance,
        "correlation": bundle.correlation,
        "pair_distances": bundle.pair_distances.tolist(),
        "notes": bundle.notes,
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
    return path


def load_diagnostics(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"diagnostics file missing: {path}")
    with open(path) as fh:
        obj = json.load(fh)
    try:
        return DiagnosticsBundle(
            mode=obj["mode"],
            projection=np.asarray(obj["projection"], dtype=np.float64).reshape(-1, 2),
            projection_participants=obj["projection_participants"],
            projection_views=obj["projection_views"],
            projection_pog=np.asarray(obj["projection_pog"], dtype=np.float64),
            same_timestamp_distance=obj["same_timestamp_distance"],
            mismatched_distance=obj["mismatched_distance"],
            correlation=obj["correlation"],
            pair_distances=np.asarray(obj["pair_distances"], dtype=np.float64).reshape(-1, 2),
            notes=obj["notes"],
        )
    except KeyError as exc:
        raise DataError(f"{path}: not a diagnostics bundle, missing {exc}") from exc


def _equivariant_rows(model, manifest, keys):
    """Screen-frame z_bar per (group, view) row, plus row metadata."""
    z_bars, participants, views, timestamps, pogs = [], [], [], [], []
    with torch.no_grad():
        for key in keys:
            sample = manifest.load_sample(key)
            images = np.stack([v.image for v in sample.views])
            feats = model.encode(images)
            z_hat = model.project_equivariant(feats)
            for i, view in enumerate(sample.views):
                rotated = rotate_embedding(
                    z_hat[i].to(torch.float64), view.effective_rotation
                )
                z_bars.append(rotated.reshape(-1).numpy())
                participants.append(sample.participant_id)
                views.append(view.view_id)
                timestamps.append(sample.timestamp)
                pogs.append(view.pog if view.pog is not None else np.full(2, np.nan))
    return (
        np.stack(z_bars).astype(np.float64),
        participants,
        views,
        np.asarray(timestamps),
        np.stack(pogs),
    )


def _normalize_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe


def embed_diagnostics(
    checkpoint, manifest, mode="equivariant", seed=0, max_samples=600, n_pairs=500
):
    """Embedding-space diagnostics on a labeled manifest.

    Emits (a) a 2-D neighbor-embedding projection, (b) mean cross-view
    distance at the same timestamp vs mismatched timestamps, and (c) the
    correlation between pairwise embedding distance and pairwise PoG
    distance over sampled pairs. Distances are Euclidean between
    L2-normalized embeddings, matching the cosine geometry the loss
    optimizes. Degenerate (zero-variance) inputs yield correlation None.
    """
    if mode not in ("equivariant", "encoder"):
        raise ConfigError(f"mode must be 'equivariant' or 'encoder', got {mode!r}")
    model = _resolve_model(checkpoint)
    keys = sorted(manifest.group_keys())
    notes = []

    if mode == "equivariant":
        if not hasattr(model, "project_equivariant"):
            raise ConfigError("equivariant diagnostics need a model with projection heads")
        rows, participants, views, timestamps, pogs = _equivariant_rows(model, manifest, keys)
    else:
        features = extract_features(model, manifest, keys=keys)
        rows = features.features.astype(np.float64)
        participants = features.participants
        views = features.views
        timestamps = features.timestamps
        pogs = features.pog

    normalized = _normalize_rows(rows)
    n = normalized.shape[0]

    # (a) 2-D projection of a deterministic subsample
    sub_rng = np.random.default_rng([seed, 1])
    take = min(max_samples, n)
    sub_idx = np.sort(sub_rng.choice(n, size=take, replace=False))
    projection = _project_2d(normalized[sub_idx], seed)

    # (b) same-timestamp vs mismatched cross-view distances
    n_views = len(manifest.views)
    by_group = np.arange(n).reshape(len(keys), n_views)
    same = []
    for g in range(len(keys)):
        for i in range(n_views):
            for j in range(i + 1, n_views):
                same.append(
                    np.linalg.norm(normalized[by_group[g, i]] - normalized[by_group[g, j]])
                )
    mis_rng = np.random.default_rng([seed, 4])
    mismatched = []
    for _ in range(len(same)):
        g, h = mis_rng.choice(len(keys), size=2, replace=False)
        i, j = mis_rng.integers(0, n_views, size=2)
        mismatched.append(
            np.linalg.norm(normalized[by_group[g, i]] - normalized[by_group[h, j]])
        )

    # (c) embedding distance vs PoG distance over sampled pairs
    correlation = None
    pair_distances = np.zeros((0, 2))
    if np.isnan(pogs).any():
        notes.append("PoG missing for some rows; correlation skipped")
    else:
        pair_rng = np.random.default_rng([seed, 2])
        pairs = pair_rng.integers(0, n, size=(n_pairs, 2))
        resample = pairs[:, 0] == pairs[:, 1]
        pairs[resample, 1] = (pairs[resample, 1] + 1) % n
        embed_d = np.linalg.norm(normalized[pairs[:, 0]] - normalized[pairs[:, 1]], axis=1)
        pog_d = np.linalg.norm(pogs[pairs[:, 0]] - pogs[pairs[:, 1]], axis=1)
        pair_distances = np.stack([embed_d, pog_d], axis=1)
        if embed_d.std() == 0 or pog_d.std() == 0:
            notes.append("degenerate distances: zero variance, correlation undefined")
        else:
            correlation = float(np.corrcoef(embed_d, pog_d)[0, 1])

    return DiagnosticsBundle(
        mode=mode,
        projection=projection,
        projection_participants=[participants[i] for i in sub_idx],
        projection_views=[views[i] for i in sub_idx],
        projection_pog=pogs[sub_idx],
        same_timestamp_distance=float(np.mean(same)),
        mismatched_distance=float(np.mean(mismatched)),
        correlation=correlation,
        pair_distances=pair_distances,
        notes=notes,
    )


def _project_2d(rows, seed):
    from sklearn.manifold import TSNE

    n = rows.shape[0]
    centered = rows - rows.mean(axis=0)
    # Barnes-Hut t-SNE segfaults on (near-)zero-variance input: the PCA
    # init divides by the spread and NaN coordinates poison the quadtree.
    # Degenerate rows and tiny samples take the principal-direction
    # fallback instead. ptp is exact on identical rows where the centered
    # residue is not (mean() carries ~1 ulp of summation roundoff).
    span = float(np.ptp(rows, axis=0).max())
    if n < 4 or span <= 1e-9 * (1.0 + float(np.abs(rows).max())):
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[:2].T
        if proj.shape[1] < 2:
            proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
        return proj
    perplexity = min(30.0, (n - 1) / 3.0)
    tsne = TSNE(
        n_components=2,
        random_state=seed,
        perplexity=perplexity,
        init="pca",
    )
    return tsne.fit_transform(rows)
