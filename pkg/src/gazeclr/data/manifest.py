"""Dataset manifest: newline-delimited JSON, one record per frame.

Record fields: participant (string), timestamp (int, monotone per
participant), view (string), image_path (relative to the manifest's
directory), rot (9 floats, row-major camera-to-screen rotation), norm
(9 floats, row-major camera-to-normalized-camera rotation), gaze
(3 floats, optional, unit direction in the view's normalized frame),
pog (2 floats, optional, normalized screen coordinates in [0,1]^2).

Floats survive the round trip bit-exactly: json emits repr-style shortest
decimals (>= 17 significant digits when needed).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from ..exceptions import (
    DataError,
    IncompleteGroupError,
    InvariantViolationError,
)
from ..geometry import GazeDirection, RotationMatrix, effective_rotation

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class ManifestRecord:
    participant: str
    timestamp: int
    view: str
    image_path: str
    rot: RotationMatrix
    norm: RotationMatrix
    gaze: Optional[np.ndarray] = None
    pog: Optional[np.ndarray] = None

    @property
    def effective_rotation(self):
        """Normalized-camera-to-screen rotation for this frame."""
        return effective_rotation(self.rot, self.norm)


@dataclass
class ViewRecord:
    view_id: str
    image: np.ndarray
    effective_rotation: RotationMatrix
    gaze_label: Optional[GazeDirection] = None
    pog: Optional[np.ndarray] = None


@dataclass
class MultiViewSample:
    """All synchronized views of one participant at one timestamp."""

    participant_id: str
    timestamp: int
    views: list

    def rotation_gaze_pairs(self):
        """(effective rotation, label vector) for every labeled view."""
        return [
            (v.effective_rotation, v.gaze_label.vector)
            for v in self.views
            if v.gaze_label is not None
        ]


@dataclass
class DatasetManifest:
    root: Path
    records: list
    views: tuple
    groups: dict = field(repr=False)  # (participant, timestamp) -> {view: record}

    @property
    def participants(self):
        seen = []
        for p, _ in self.groups:
            if p not in seen:
                seen.append(p)
        return seen

    def group_keys(self, participant=None):
        keys = list(self.groups)
        if participant is not None:
            keys = [k for k in keys if k[0] == participant]
        return keys

    def load_sample(self, key, expected_size=None):
        """Materialize one group: read images, build typed view records."""
        group = self.groups.get(tuple(key))
        if group is None:
            raise DataError(f"no group {key} in manifest")
        views = []
        for view_id in self.views:
            rec = group[view_id]
            image = load_image(self.root / rec.image_path)
            if expected_size is not None and image.shape[:2] != (expected_size, expected_size):
                raise DataError(
                    f"{rec.image_path}: image is {image.shape[:2]}, expected {expected_size}"
                )
            gaze = GazeDirection(rec.gaze, frame=f"norm:{view_id}") if rec.gaze is not None else None
            views.append(
                ViewRecord(
                    view_id=view_id,
                    image=image,
                    effective_rotation=rec.effective_rotation,
                    gaze_label=gaze,
                    pog=rec.pog,
                )
            )
        return MultiViewSample(participant_id=key[0], timestamp=key[1], views=views)


def load_image(path):
    """8-bit RGB file -> float32 array in [0,1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file missing: {path}")
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(image, path):
    """Float [0,1] array -> 8-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _parse_matrix(values, what, line_no):
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (9,):
        raise DataError(f"line {line_no}: {what} must have 9 entries, got {arr.shape}")
    try:
        return RotationMatrix(arr.reshape(3, 3))
    except InvariantViolationError as exc:
        raise InvariantViolationError(f"line {line_no}: {what}: {exc}") from exc


def load_manifest(path, expected_views=None):
    """Parse, validate, and group a manifest file.

    Every (participant, timestamp) group must contain exactly one record
    per view of the manifest's view set (the union of views seen, or
    ``expected_views`` when given). Rotation matrices are validated here;
    image files are only checked at sample-load time.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")

    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: malformed record: {exc}") from exc
            try:
                participant = str(obj["participant"])
                timestamp = int(obj["timestamp"])
                view = str(obj["view"])
                image_path = str(obj["image_path"])
            except KeyError as exc:
                raise DataError(f"line {line_no}: missing field {exc}") from exc
            rot = _parse_matrix(obj.get("rot"), "rot", line_no)
            norm = _parse_matrix(obj.get("norm"), "norm", line_no)
            rot = RotationMatrix(rot.m, from_frame=f"cam:{view}", to_frame="screen")
            norm = RotationMatrix(norm.m, from_frame=f"cam:{view}", to_frame=f"norm:{view}")
            gaze = obj.get("gaze")
            if gaze is not None:
                gaze = np.asarray(gaze, dtype=np.float64)
                if gaze.shape != (3,):
                    raise DataError(f"line {line_no}: gaze must have 3 entries")
            pog = obj.get("pog")
            if pog is not None:
                pog = np.asarray(pog, dtype=np.float64)
                if pog.shape != (2,):
                    raise DataError(f"line {line_no}: pog must have 2 entries")
            records.append(
                ManifestRecord(
                    participant=participant,
                    timestamp=timestamp,
                    view=view,
                    image_path=image_path,
                    rot=rot,
                    norm=norm,
                    gaze=gaze,
                    pog=pog,
                )
            )

    if not records:
        raise DataError(f"{path}: empty manifest")

    views = tuple(expected_views) if expected_views else tuple(sorted({r.view for r in records}))

    groups = {}
    last_timestamp = {}
    for rec in records:
        key = (rec.participant, rec.timestamp)
        prev = last_timestamp.get(rec.participant)
        if prev is not None and rec.timestamp < prev:
            raise DataError(
                f"timestamps for participant {rec.participant!r} are not monotone: "
                f"{rec.timestamp} after {prev}"
            )
        last_timestamp[rec.participant] = rec.timestamp
        group = groups.setdefault(key, {})
        if rec.view in group:
            raise IncompleteGroupError(f"group {key} has duplicate view {rec.view!r}")
        if rec.view not in views:
            raise IncompleteGroupError(f"group {key} has unexpected view {rec.view!r}")
        group[rec.view] = rec

    for key, group in groups.items():
        missing = set(views) - set(group)
        if missing:
            raise IncompleteGroupError(f"group {key} is missing views {sorted(missing)}")

    return DatasetManifest(root=path.parent, records=records, views=views, groups=groups)


def subset_manifest(manifest, participants=None, keys=None):
    """In-memory restriction to given participants or explicit group keys.

    Shares the parent's root and image files; group order follows the
    parent manifest so derived batches stay deterministic.
    """
    if keys is not None:
        keyset = {tuple(k) for k in keys}
    elif participants is not None:
        wanted = set(participants)
        keyset = {key for key in manifest.groups if key[0] in wanted}
    else:
        raise DataError("subset_manifest needs participants or keys")
    missing = keyset - set(manifest.groups)
    if missing:
        raise DataError(f"groups not in manifest: {sorted(missing)[:3]}")
    if not keyset:
        raise DataError("subset selects no groups")
    groups = {key: dict(group) for key, group in manifest.groups.items() if key in keyset}
    records = [r for r in manifest.records if (r.participant, r.timestamp) in keyset]
    return DatasetManifest(root=manifest.root, records=records, views=manifest.views, groups=groups)


def write_manifest(records, path):
    """Serialize records (dicts or ManifestRecord) as manifest lines."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            if isinstance(rec, ManifestRecord):
                obj = {
                    "participant": rec.participant,
                    "timestamp": rec.timestamp,
                    "view": rec.view,
                    "image_path": rec.image_path,
                    "rot": [float(x) for x in rec.rot.m.reshape(-1)],
                    "norm": [float(x) for x in rec.norm.m.reshape(-1)],
                }
                if rec.gaze is not None:
                    obj["gaze"] = [float(x) for x in rec.gaze]
                if rec.pog is not None:
                    obj["pog"] = [float(x) for x in rec.pog]
            else:
                obj = rec
            fh.write(json.dumps(obj) + "\n")
    return path
