"""Test doubles: oracle encoders and label-manipulated manifests."""

import dataclasses

import numpy as np
import torch
from torch import nn

from gazeclr.data import DatasetManifest
from gazeclr.data.synth import blob_centroid
from gazeclr.geometry import pitch_yaw_to_vector, vector_to_pitch_yaw
from gazeclr.model import EncoderConfig, GazeEstimator


class OracleEncoder(nn.Module):
    """Reads the blob centroid straight out of the pixels.

    The synthetic renderer places the blob linearly in (yaw, pitch), so
    these two features make gaze regression a linearly-solvable problem.
    """

    def forward(self, x):
        images = x.permute(0, 2, 3, 1).detach().numpy()
        size = images.shape[1]
        feats = [blob_centroid(im) for im in images]
        t = torch.tensor(np.asarray(feats), dtype=torch.float32)
        return t / size * 2.0 - 1.0


class ConstantEncoder(nn.Module):
    """Maps every image to the same feature vector."""

    def __init__(self, dim=8):
        super().__init__()
        self.dim = dim

    def forward(self, x):
        return torch.ones(x.shape[0], self.dim)


def oracle_estimator(seed=0, input_size=64):
    cfg = EncoderConfig.tiny(feature_dim=2, input_size=input_size)
    return GazeEstimator(OracleEncoder(), cfg, seed=seed)


def constant_estimator(seed=0, dim=8, input_size=64):
    cfg = EncoderConfig.tiny(feature_dim=dim, input_size=input_size)
    return GazeEstimator(ConstantEncoder(dim), cfg, seed=seed)


def zeroed_regressor(estimator):
    for p in estimator.regressor.parameters():
        nn.init.zeros_(p)
    return estimator


def _rebuild(manifest, records):
    groups = {}
    for rec in records:
        groups.setdefault((rec.participant, rec.timestamp), {})[rec.view] = rec
    return DatasetManifest(
        root=manifest.root, records=records, views=manifest.views, groups=groups
    )


def replace_labels(manifest, transform):
    """New in-memory manifest with gaze labels rewritten by transform(rec)."""
    records = [dataclasses.replace(r, gaze=transform(r)) for r in manifest.records]
    return _rebuild(manifest, records)


def offset_subject_labels(manifest, subject, pitch_offset_rad):
    """Rotate one subject's labels by a constant pitch offset."""

    def transform(rec):
        if rec.participant != subject or rec.gaze is None:
            return rec.gaze
        pitch, yaw = vector_to_pitch_yaw(rec.gaze)
        return pitch_yaw_to_vector(pitch + pitch_offset_rad, yaw).vector

    return replace_labels(manifest, transform)


def constant_labels(manifest, pitch, yaw):
    vec = pitch_yaw_to_vector(pitch, yaw).vector
    return replace_labels(manifest, lambda rec: vec.copy())
