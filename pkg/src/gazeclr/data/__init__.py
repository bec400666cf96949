from .augment import AugmentationConfig, augment
from .manifest import (
    DatasetManifest,
    ManifestRecord,
    MultiViewSample,
    ViewRecord,
    load_image,
    load_manifest,
    save_image,
    subset_manifest,
    write_manifest,
)
from .pairs import make_multi_view_pairs, make_single_view_pairs
from .sampler import BatchStream, single_participant_batches
from .synth import blob_centroid, synth_generate

__all__ = [
    "AugmentationConfig",
    "BatchStream",
    "DatasetManifest",
    "ManifestRecord",
    "MultiViewSample",
    "ViewRecord",
    "augment",
    "blob_centroid",
    "load_image",
    "load_manifest",
    "make_multi_view_pairs",
    "make_single_view_pairs",
    "save_image",
    "subset_manifest",
    "single_participant_batches",
    "synth_generate",
    "write_manifest",
]
