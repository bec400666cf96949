"""3-D gaze and rotation math.

Conventions used throughout the package:

- A gaze direction is a unit 3-vector in a stated reference frame
  (a camera id or "screen"), pointing from the face toward the target.
- Angle parametrization: ``v = (-cos(pitch)*sin(yaw), -sin(pitch),
  -cos(pitch)*cos(yaw))``, i.e. the optical axis is -z, pitch is positive
  looking up, yaw is positive looking toward -x. ``(0, 0)`` maps to
  ``(0, 0, -1)``, which is the usual normalized-camera convention in
  appearance-based gaze work.
- Rotation matrices act on column vectors from the left: ``v_to = m @ v_from``.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    DegeneratePoleError,
    InsufficientViewsError,
    InvalidDirectionError,
    InvariantViolationError,
)

# Constructor tolerances: accept as-is below STRICT_TOL, re-orthonormalize up
# to REPAIR_TOL (manifests carry serialized decimals), reject beyond that.
STRICT_TOL = 1e-9
REPAIR_TOL = 1e-6


def _as_unit_vector(g, what="gaze direction"):
    """Coerce a GazeDirection or array-like to a unit 3-vector."""
    v = np.asarray(g.vector if isinstance(g, GazeDirection) else g, dtype=np.float64)
    if v.shape != (3,):
        raise InvalidDirectionError(f"{what} must be a 3-vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidDirectionError(f"{what} contains non-finite values")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise InvalidDirectionError(f"{what} is the zero vector")
    return v / norm


@dataclass(frozen=True)
class GazeDirection:
    """Unit 3-vector toward the point of regard, tagged with its frame."""

    vector: np.ndarray
    frame: str = "screen"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.shape != (3,) or not np.all(np.isfinite(v)):
            raise InvalidDirectionError(f"invalid gaze vector {self.vector!r}")
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > STRICT_TOL:
            if norm == 0.0:
                raise InvalidDirectionError("gaze vector is the zero vector")
            if abs(norm - 1.0) > REPAIR_TOL:
                raise InvalidDirectionError(f"gaze vector norm {norm} is not 1")
            v = v / norm
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class RotationMatrix:
    """3x3 special-orthogonal transform from ``from_frame`` to ``to_frame``."""

    m: np.ndarray
    from_frame: str = ""
    to_frame: str = ""

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise InvariantViolationError(f"rotation must be a finite 3x3 matrix, got {self.m!r}")
        defect = _rotation_defect(m)
        if defect > STRICT_TOL:
            if defect > REPAIR_TOL:
                raise InvariantViolationError(
                    f"matrix is not a rotation (orthonormality/det defect {defect:.3g})"
                )
            m = _reorthonormalize(m)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def inverse(self):
        return RotationMatrix(self.m.T, from_frame=self.to_frame, to_frame=self.from_frame)

    def apply(self, v):
        return self.m @ np.asarray(v, dtype=np.float64)


def _rotation_defect(m):
    """Max deviation from orthonormality and unit determinant."""
    ortho = np.abs(m.T @ m - np.eye(3)).max()
    det = abs(np.linalg.det(m) - 1.0)
    return max(float(ortho), float(det))


def _reorthonormalize(m):
    """Project onto SO(3) via SVD (nearest rotation in Frobenius norm)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def pitch_yaw_to_vector(pitch, yaw, frame="screen"):
    """Convert (pitch, yaw) in radians to a unit GazeDirection.

    Requires pitch in (-pi/2, pi/2) and yaw in (-pi, pi].
    """
    if not (-np.pi / 2 < pitch < np.pi / 2):
        raise InvalidDirectionError(f"pitch {pitch} outside (-pi/2, pi/2)")
    if not (-np.pi < yaw <= np.pi):
        raise InvalidDirectionError(f"yaw {yaw} outside (-pi, pi]")
    cp = np.cos(pitch)
    v = np.array([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)])
    return GazeDirection(v, frame=frame)


def vector_to_pitch_yaw(g):
    """Invert pitch_yaw_to_vector. Raises DegeneratePoleError at |g_y| = 1."""
    v = _as_unit_vector(g)
    if abs(v[1]) >= 1.0 - 1e-12:
        raise DegeneratePoleError("yaw is undefined for a direction along +/-y")
    pitch = float(-np.arcsin(v[1]))
    yaw = float(np.arctan2(-v[0], -v[2]))
    return pitch, yaw


def angular_error_deg(g, g_hat):
    """Angle between two gaze directions, in degrees.

    Both inputs are normalized defensively. The value is
    (180/pi) * arccos(g.g_hat / (|g||g_hat|)), evaluated through the
    equivalent atan2(|g x g_hat|, g.g_hat) form, which keeps full precision
    near 0 and 180 degrees where arccos loses ~1e-8 rad to rounding.
    """
    u = _as_unit_vector(g)
    w = _as_unit_vector(g_hat)
    cross = np.cross(u, w)
    return float(np.degrees(np.arctan2(np.linalg.norm(cross), np.dot(u, w))))


def pitch_yaw_arrays_to_vectors(pitch, yaw):
    """Vectorized angle-to-direction conversion; returns an (N, 3) array."""
    pitch = np.asarray(pitch, dtype=np.float64)
    yaw = np.asarray(yaw, dtype=np.float64)
    cp = np.cos(pitch)
    return np.stack([-cp * np.sin(yaw), -np.sin(pitch), -cp * np.cos(yaw)], axis=-1)


def angular_error_deg_arrays(v, w):
    """Vectorized angular error between rows of (N, 3) arrays, in degrees."""
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    w = w / np.linalg.norm(w, axis=-1, keepdims=True)
    cross = np.linalg.norm(np.cross(v, w), axis=-1)
    dot = np.sum(v * w, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def effective_rotation(r_cam_to_screen, m_norm):
    """Compose the camera-to-screen rotation with the normalization rotation.

    ``r_cam_to_screen`` maps the original camera frame to the screen frame;
    ``m_norm`` maps the original camera frame to the normalized camera frame.
    The result ``r_cam_to_screen @ m_norm.T`` maps the normalized camera frame
    to the screen frame (a rotation's inverse is its transpose).
    """
    if not isinstance(r_cam_to_screen, RotationMatrix):
        r_cam_to_screen = RotationMatrix(r_cam_to_screen)
    if not isinstance(m_norm, RotationMatrix):
        m_norm = RotationMatrix(m_norm)
    if (
        r_cam_to_screen.from_frame
        and m_norm.from_frame
        and r_cam_to_screen.from_frame != m_norm.from_frame
    ):
        raise InvariantViolationError(
            f"frame chain mismatch: {r_cam_to_screen.from_frame!r} vs {m_norm.from_frame!r}"
        )
    return RotationMatrix(
        r_cam_to_screen.m @ m_norm.m.T,
        from_frame=m_norm.to_frame,
        to_frame=r_cam_to_screen.to_frame,
    )


def check_multiview_consistency(views):
    """Max pairwise angular discrepancy after mapping labels to a common frame.

    ``views`` is a sequence of (rotation, gaze) pairs where each rotation maps
    that view's (normalized) camera frame to the common frame and each gaze is
    the label in the view's own frame. Synchronized views of one person share
    a single common-frame direction, so a geometrically consistent sample
    returns ~0. Returns degrees.
    """
    pairs = list(views)
    if len(pairs) < 2:
        raise InsufficientViewsError(
            f"need at least 2 labeled views, got {len(pairs)}"
        )
    common = []
    for rot, gaze in pairs:
        if not isinstance(rot, RotationMatrix):
            rot = RotationMatrix(rot)
        common.append(rot.apply(_as_unit_vector(gaze)))
    worst = 0.0
    for i in range(len(common)):
        for j in range(i + 1, len(common)):
            worst = max(worst, angular_error_deg(common[i], common[j]))
    return worst


def random_rotation(rng, max_angle_rad=np.pi):
    """Uniform-axis random rotation with angle drawn in [0, max_angle_rad]."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, max_angle_rad)
    return RotationMatrix(_axis_angle(axis, angle))


def _axis_angle(axis, angle):
    """Rodrigues formula: R = I + sin(t)[k]x + (1 - cos(t))[k]x^2."""
    kx = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def axis_angle_rotation(axis, angle, from_frame="", to_frame=""):
    """RotationMatrix about ``axis`` (normalized internally) by ``angle`` rad."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return RotationMatrix(_axis_angle(axis, angle), from_frame=from_frame, to_frame=to_frame)
