"""Positive-pair construction for the two contrastive signals."""

from ..exceptions import InsufficientViewsError
from .augment import augment


def make_single_view_pairs(sample, cfg, draw):
    """Two independent augmentation draws of each view's image.

    Returns one (augmented, augmented, view_id) triple per view. These
    drive the invariance loss: both members show the same gaze, differing
    only in appearance.
    """
    pairs = []
    for view in sample.views:
        first = augment(view.image, cfg, draw)
        second = augment(view.image, cfg, draw)
        pairs.append((first, second, view.view_id))
    return pairs


def make_multi_view_pairs(sample, cfg, draw):
    """All ordered pairs of synchronized views, each view augmented once.

    One augmentation is drawn per view; the |V|(|V|-1) ordered pairs then
    reference those |V| augmented images. The overall objective indexes
    equivariance embeddings by (batch, view) only, so a single augmented
    instance per view is the consistent reading.
    """
    if len(sample.views) < 2:
        raise InsufficientViewsError(
            f"multi-view pairs need >= 2 views, sample has {len(sample.views)}"
        )
    augmented = [(augment(v.image, cfg, draw), v.view_id) for v in sample.views]
    pairs = []
    for i, (img_i, view_i) in enumerate(augmented):
        for j, (img_j, view_j) in enumerate(augmented):
            if i != j:
                pairs.append((img_i, img_j, view_i, view_j))
    return pairs
