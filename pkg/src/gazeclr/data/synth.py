"""Synthetic multi-view gaze corpus.

Per (participant, timestamp) group, a latent screen-frame direction g_bar
is drawn uniformly from a 40-degree-half-angle cone about -z. Each view v
has a fixed rig rotation (camera to screen; one view is the identity, the
rest tilted up to 30 degrees) and a per-frame normalization rotation
(small: <= 3 degree base plus <= 1.5 degree jitter), composed into the
effective rotation R_v exactly as the loader composes them. The stored
per-view label is g_v = R_v^T g_bar, so mapping every label back to the
screen frame reproduces g_bar bit-for-bit modulo float rounding: the
multi-view consistency check is 0 by construction.

The image is the label made visible: a bright radially-symmetric blob
whose position linearly encodes the view's (pitch, yaw) over a +/-75
degree span (the worst-case per-view angle is 40 + 30 + 4.5 < 75).
Participant nuisance (base color, texture sinusoids) and per-frame
photometric noise supply the appearance variation that the contrastive
stage must learn to ignore. Nuisance draws come from a generator separate
from the geometry draws, so two corpora generated with equal ``seed`` but
different ``nuisance_seed`` have identical labels and different images.
"""

import math
from pathlib import Path

import numpy as np

from ..exceptions import InsufficientViewsError
from ..geometry import (
    RotationMatrix,
    axis_angle_rotation,
    effective_rotation,
    vector_to_pitch_yaw,
)
from .manifest import load_manifest, save_image, write_manifest

CONE_HALF_ANGLE_DEG = 40.0
MAX_RIG_ANGLE_DEG = 30.0
POSITION_SPAN_DEG = 75.0  # blob map covers pitch/yaw in [-75, 75]
POG_SPAN_DEG = 80.0  # screen pitch/yaw in [-40, 40] -> [0, 1]

_LUMA64 = np.array([0.299, 0.587, 0.114])
_BLOB_TINT = np.array([1.0, 0.97, 0.9])


def _sample_cone(rng, half_angle_deg):
    """Uniform direction within a cone about -z (uniform over solid angle)."""
    cos_min = math.cos(math.radians(half_angle_deg))
    cos_t = rng.uniform(cos_min, 1.0)
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = rng.uniform(0.0, 2.0 * math.pi)
    return np.array([sin_t * math.cos(phi), sin_t * math.sin(phi), -cos_t])


def _random_axis(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def make_rig(views, seed):
    """Fixed per-view camera-to-screen rotations: v0 identity, rest tilted."""
    rng = np.random.default_rng([seed, 0])
    rig = [RotationMatrix(np.eye(3), from_frame="cam:v0", to_frame="screen")]
    for i in range(1, views):
        angle = math.radians(MAX_RIG_ANGLE_DEG * i / max(1, views - 1))
        rig.append(
            axis_angle_rotation(
                _random_axis(rng), angle, from_frame=f"cam:v{i}", to_frame="screen"
            )
        )
    return rig


def gaze_to_blob_xy(pitch, yaw, size, margin):
    """Linear (pitch, yaw) -> pixel position map used by the renderer."""
    span = math.radians(POSITION_SPAN_DEG)
    x = margin + (0.5 + yaw / (2 * span)) * (size - 1 - 2 * margin)
    y = margin + (0.5 - pitch / (2 * span)) * (size - 1 - 2 * margin)
    return x, y


def render_view_image(size, pitch, yaw, nuisance, photo_rng):
    """Deterministic rendering: textured background plus a gaze-coding blob."""
    margin = max(6, round(0.15 * size))
    x, y = gaze_to_blob_xy(pitch, yaw, size, margin)

    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = 0.055 * size
    bump = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2.0 * sigma * sigma))

    image = np.empty((size, size, 3))
    for ch in range(3):
        phase = nuisance["phase"][ch]
        fx, fy = nuisance["freq"]
        texture = nuisance["amp"][ch] * np.sin(
            2.0 * math.pi * (fx * xs / size + fy * ys / size) + phase
        )
        # the blob washes out texture beneath it; an asymmetric background
        # gradient under the peak would otherwise drag the apparent centroid
        # when downstream blurs flatten the core
        image[:, :, ch] = nuisance["base"][ch] + texture * (1.0 - bump)

    image += (0.7 * bump)[:, :, None] * _BLOB_TINT[None, None, :]

    image += photo_rng.normal(0.0, 0.02)  # per-frame brightness shift
    image += photo_rng.normal(0.0, 0.012, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def participant_nuisance(rng):
    return {
        "base": 0.26 + 0.12 * rng.uniform(size=3),
        "amp": 0.035 + 0.035 * rng.uniform(size=3),
        "freq": 2.0 + 3.0 * rng.uniform(size=2),
        "phase": rng.uniform(0.0, 2.0 * math.pi, size=3),
    }


def blob_centroid(image):
    """Intensity-weighted centroid (x, y) of the bright blob core.

    Luminance is pre-smoothed with a fixed gaussian, then thresholded at
    70% of its range so only the blob core carries weight. The smoothing
    matters: thresholding raw pixels leaves a handful of core pixels whose
    noise dominates the estimate. This measure is what the
    photometric-invariance property is stated over.
    """
    import cv2

    lum = (np.asarray(image, dtype=np.float64) @ _LUMA64).astype(np.float32)
    lum = cv2.GaussianBlur(lum, (9, 9), sigmaX=1.5).astype(np.float64)
    lo, hi = float(lum.min()), float(lum.max())
    weights = np.clip(lum - (lo + 0.70 * (hi - lo)), 0.0, None)
    total = weights.sum()
    if total <= 0.0:
        return (math.nan, math.nan)
    ys, xs = np.mgrid[0 : lum.shape[0], 0 : lum.shape[1]]
    return (float((weights * xs).sum() / total), float((weights * ys).sum() / total))


def synth_generate(out_path, n_participants, groups_per_participant, views,
                   image_size=64, seed=0, nuisance_seed=None):
    """Write images plus manifest under out_path; return the loaded manifest."""
    if views < 2:
        raise InsufficientViewsError(f"synthetic rig needs >= 2 views, got {views}")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    if nuisance_seed is None:
        nuisance_seed = seed

    rig = make_rig(views, seed)
    records = []
    for p_idx in range(n_participants):
        participant = f"p{p_idx:02d}"
        geo_rng = np.random.default_rng([seed, 2, p_idx])
        nui_rng = np.random.default_rng([nuisance_seed, 1, p_idx])
        nuisance = participant_nuisance(nui_rng)
        # fixed per-view normalization base, tiny per-frame jitter on top
        norm_base = [
            axis_angle_rotation(
                _random_axis(geo_rng),
                geo_rng.uniform(0.0, math.radians(3.0)),
                from_frame=f"cam:v{v}",
                to_frame=f"norm:v{v}",
            )
            for v in range(views)
        ]
        for t in range(groups_per_participant):
            g_bar = _sample_cone(geo_rng, CONE_HALF_ANGLE_DEG)
            pitch_s, yaw_s = vector_to_pitch_yaw(g_bar)
            span = math.radians(POG_SPAN_DEG)
            pog = np.array([0.5 - yaw_s / span, 0.5 - pitch_s / span])
            for v in range(views):
                view = f"v{v}"
                jitter = axis_angle_rotation(
                    _random_axis(geo_rng), geo_rng.uniform(0.0, math.radians(1.5))
                )
                norm = RotationMatrix(
                    (norm_base[v].m @ jitter.m),
                    from_frame=f"cam:{view}",
                    to_frame=f"norm:{view}",
                )
                r_eff = effective_rotation(rig[v], norm)
                g_view = r_eff.m.T @ g_bar
                pitch_v, yaw_v = vector_to_pitch_yaw(g_view)
                image = render_view_image(image_size, pitch_v, yaw_v, nuisance, nui_rng)
                rel_path = f"images/{participant}/t{t:05d}_{view}.png"
                save_image(image, out / rel_path)
                records.append(
                    {
                        "participant": participant,
                        "timestamp": t,
                        "view": view,
                        "image_path": rel_path,
                        "rot": [float(x) for x in rig[v].m.reshape(-1)],
                        "norm": [float(x) for x in norm.m.reshape(-1)],
                        "gaze": [float(x) for x in g_view],
                        "pog": [float(x) for x in pog],
                    }
                )

    manifest_path = write_manifest(records, out)
    return load_manifest(manifest_path)
