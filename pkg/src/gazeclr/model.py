"""Encoder, projection heads, Stage-II regressor, checkpoint persistence.

Two encoders are available behind one config: "resnet18" (feature_dim 512,
average-pool output, trained from scratch) for full-scale runs and
"tinycnn" for desk-scale tests. Both consume channels-last float images
in [0,1] and emit (N, feature_dim) features.

The tinycnn departs from an off-the-shelf stack in two load-bearing ways:
  - GroupNorm instead of BatchNorm, so chunked gradient accumulation is
    exactly equivalent to full-batch computation and every feature is a
    pure per-sample function;
  - a spatial soft-argmax readout next to the usual average pool. With
    only per-sample normalization in the stack, pooled features of a
    freshly initialized net are nearly identical across inputs (the map
    is dominated by its input-independent component), which starts the
    contrastive phase inside the collapse basin it can never leave. The
    attention coordinates vary O(1) with content position at any weight
    setting, so training has something to grab from step one.
"""

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import (
    CheckpointError,
    CheckpointIntegrityError,
    ConfigError,
    IncompatibleCheckpointError,
    ShapeError,
)
from .geometry import RotationMatrix

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "resnet18"
    feature_dim: int = 512
    input_size: int = 128
    from_scratch: bool = True

    def __post_init__(self):
        if self.architecture not in ("resnet18", "tinycnn"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "resnet18" and self.feature_dim != 512:
            raise ConfigError("resnet18 feature_dim is fixed at 512")
        if self.feature_dim <= 0:
            raise ConfigError(f"feature_dim must be positive, got {self.feature_dim}")
        if self.input_size not in (64, 128):
            raise ConfigError(f"input_size must be 64 or 128, got {self.input_size}")
        if not self.from_scratch:
            raise ConfigError("pretrained encoder weights are not part of this framework")

    @classmethod
    def tiny(cls, feature_dim=64, input_size=64):
        return cls(architecture="tinycnn", feature_dim=feature_dim, input_size=input_size)


@dataclass(frozen=True)
class ProjectionHeadConfig:
    hidden_dim: int = 512
    out_dim: int = 180

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.out_dim <= 0:
            raise ConfigError("head dims must be positive")
        if self.out_dim % 3 != 0:
            raise ConfigError(
                f"out_dim must be divisible by 3 for the 3 x d' reshape, got {self.out_dim}"
            )

    @property
    def d_prime(self):
        return self.out_dim // 3


class TinyCNN(nn.Module):
    """3 conv blocks + [average pool | spatial soft-argmax] readout."""

    # Sharpness of the readout attention. At 8.0 a single above-background
    # bump in the 8x8 final map receives essentially all the mass, so the
    # coordinate features track content position from random init onward.
    attention_beta = 8.0

    width = 64

    def __init__(self, feature_dim):
        super().__init__()
        self.feature_dim = feature_dim
        w = self.width
        self.blocks = nn.Sequential(
            # stride-2 stem: quarters the conv budget, CPU-minute tests
            nn.Conv2d(3, 32, kernel_size=5, stride=2, padding=2),
            nn.GroupNorm(8, 32),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, w, kernel_size=3, padding=1),
            nn.GroupNorm(8, w),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(w, w, kernel_size=3, padding=1),
            nn.GroupNorm(8, w),
            nn.ReLU(inplace=True),
        )
        self.readout = nn.Linear(3 * w, feature_dim)

    def forward(self, x):
        m = self.blocks(x)
        n, c, h, w = m.shape
        att = torch.softmax(
            self.attention_beta * m.reshape(n, c, h * w), dim=2
        ).reshape(n, c, h, w)
        xs = torch.linspace(-1.0, 1.0, w, device=x.device, dtype=x.dtype)
        ys = torch.linspace(-1.0, 1.0, h, device=x.device, dtype=x.dtype)
        ex = (att * xs.view(1, 1, 1, w)).sum(dim=(2, 3))
        ey = (att * ys.view(1, 1, h, 1)).sum(dim=(2, 3))
        gap = m.mean(dim=(2, 3))
        return self.readout(torch.cat([gap, ex, ey], dim=1))


def _build_resnet18():
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    net.fc = nn.Identity()  # keep the average-pool output
    return net


def _images_to_nchw(images, input_size):
    if isinstance(images, torch.Tensor):
        t = images.to(torch.float32)
    else:
        t = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ShapeError(f"expected N x H x W x 3 images, got {tuple(t.shape)}")
    if t.shape[1] != input_size or t.shape[2] != input_size:
        raise ShapeError(
            f"encoder expects {input_size}x{input_size} inputs, got {t.shape[1]}x{t.shape[2]}"
        )
    return t.permute(0, 3, 1, 2)


class ProjectionHead(nn.Module):
    """Two-layer MLP with one rectified-linear nonlinearity between."""

    def __init__(self, in_dim, cfg):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, cfg.hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.hidden_dim, cfg.out_dim),
        )

    def forward(self, x):
        return self.net(x)


class GazeClrModel(nn.Module):
    """Stage-I model: encoder E plus the two projection heads p1, p2."""

    def __init__(self, encoder_cfg=None, head_cfg=None, seed=None):
        super().__init__()
        self.encoder_cfg = encoder_cfg or EncoderConfig()
        self.head_cfg = head_cfg or ProjectionHeadConfig()
        if seed is not None:
            torch.manual_seed(seed)
        if self.encoder_cfg.architecture == "tinycnn":
            self.encoder = TinyCNN(self.encoder_cfg.feature_dim)
        else:
            self.encoder = _build_resnet18()
        self.head_invariant = ProjectionHead(self.encoder_cfg.feature_dim, self.head_cfg)
        self.head_equivariant = ProjectionHead(self.encoder_cfg.feature_dim, self.head_cfg)

    def encode(self, images):
        """N x H x W x 3 images in [0,1] -> N x feature_dim features."""
        x = _images_to_nchw(images, self.encoder_cfg.input_size)
        if x.shape[0] == 0:
            return torch.zeros(0, self.encoder_cfg.feature_dim)
        return self.encoder(x)

    def project_invariant(self, features):
        return self.head_invariant(features)

    def project_equivariant(self, features):
        out = self.head_equivariant(features)
        return out.reshape(out.shape[0], 3, self.head_cfg.d_prime)


class GazeRegressor(nn.Module):
    """Two-layer pitch/yaw head for Stage II."""

    def __init__(self, in_dim, hidden_dim=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, 2),
        )

    def forward(self, features):
        return self.net(features)


class GazeEstimator(nn.Module):
    """Stage-II model: encoder + regressor, no projection heads."""

    def __init__(self, encoder, encoder_cfg, regressor=None, seed=None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.encoder = encoder
        self.encoder_cfg = encoder_cfg
        self.regressor = regressor or GazeRegressor(encoder_cfg.feature_dim)

    def encode(self, images):
        x = _images_to_nchw(images, self.encoder_cfg.input_size)
        if x.shape[0] == 0:
            return torch.zeros(0, self.encoder_cfg.feature_dim)
        return self.encoder(x)

    def forward(self, images):
        """Images -> pitch/yaw tensor of shape (N, 2)."""
        return self.regressor(self.encode(images))

    def regress_gaze(self, features):
        """Features -> (N, 3) unit gaze vectors through the pitch/yaw head."""
        return pitch_yaw_to_vector_torch(self.regressor(features))


def pitch_yaw_to_vector_torch(pitch_yaw):
    """Differentiable (N,2) pitch/yaw -> (N,3) unit gaze vectors."""
    pitch = pitch_yaw[:, 0]
    yaw = pitch_yaw[:, 1]
    cp = torch.cos(pitch)
    return torch.stack([-cp * torch.sin(yaw), -torch.sin(pitch), -cp * torch.cos(yaw)], dim=1)


def regress_gaze(estimator, features):
    """Features -> unit gaze vectors through the pitch/yaw head."""
    return estimator.regress_gaze(features)


def rotate_embedding(z_hat, r):
    """z_bar = R z_hat for one (3, d') equivariance embedding."""
    mat = r.m if isinstance(r, RotationMatrix) else np.asarray(r, dtype=np.float64)
    if isinstance(z_hat, torch.Tensor):
        return torch.from_numpy(mat.copy()).to(z_hat.dtype) @ z_hat
    z = np.asarray(z_hat)
    if z.shape[0] != 3:
        raise ShapeError(f"z_hat must be (3, d'), got {z.shape}")
    return mat @ z


def config_snapshot(encoder_cfg, head_cfg, extra=None):
    snap = {"encoder": asdict(encoder_cfg), "heads": asdict(head_cfg)}
    if extra:
        snap.update(extra)
    return snap


@dataclass
class Checkpoint:
    state: dict
    config: dict
    step: int
    version: int = CHECKPOINT_VERSION


def save_checkpoint(checkpoint, path):
    """Weights blob (torch format) + JSON sidecar with hash, step, config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(checkpoint.state, buf)
    blob = buf.getvalue()
    path.write_bytes(blob)
    sidecar = {
        "version": checkpoint.version,
        "step": int(checkpoint.step),
        "config": checkpoint.config,
        "weights_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(path.with_suffix(path.suffix + ".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return path


def load_checkpoint(path, expect_config=None):
    """Verify integrity and version, then deserialize the blob."""
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not path.exists():
        raise CheckpointError(f"checkpoint blob missing: {path}")
    if not sidecar_path.exists():
        raise CheckpointIntegrityError(f"checkpoint sidecar missing: {sidecar_path}")
    with open(sidecar_path) as fh:
        sidecar = json.load(fh)
    if sidecar.get("version") != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint version {sidecar.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    blob = path.read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    if digest != sidecar.get("weights_sha256"):
        raise CheckpointIntegrityError(f"checkpoint blob hash mismatch for {path}")
    if expect_config is not None:
        stored = sidecar.get("config", {})
        for section in ("encoder", "heads"):
            if section in expect_config and stored.get(section) != expect_config[section]:
                raise IncompatibleCheckpointError(
                    f"checkpoint {section} config {stored.get(section)} does not match "
                    f"expected {expect_config[section]}"
                )
    try:
        state = torch.load(io.BytesIO(blob), weights_only=False)
    except Exception as exc:
        raise CheckpointIntegrityError(f"cannot deserialize checkpoint blob: {exc}") from exc
    return Checkpoint(
        state=state,
        config=sidecar.get("config", {}),
        step=sidecar.get("step", 0),
        version=sidecar["version"],
    )


def build_model_from_checkpoint(checkpoint):
    """Reconstruct a Stage-I model and load its weights."""
    cfg = checkpoint.config
    try:
        encoder_cfg = EncoderConfig(**cfg["encoder"])
        head_cfg = ProjectionHeadConfig(**cfg["heads"])
    except (KeyError, TypeError) as exc:
        raise IncompatibleCheckpointError(f"checkpoint config incomplete: {exc}") from exc
    model = GazeClrModel(encoder_cfg, head_cfg)
    model.load_state_dict(checkpoint.state["model"])
    return model
