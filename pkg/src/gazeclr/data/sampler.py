"""Batch construction. Mini-batches draw all samples from one participant:
with mixed identities the contrastive negatives are separable by identity
alone, and the representation collapses onto it. A multi-participant mode
exists for exactly that ablation."""

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class BatchStream:
    """One epoch of batches. Each batch is a list of (participant, timestamp)
    group keys; materialize with manifest.load_sample."""

    batches: list
    skipped: dict = field(default_factory=dict)  # participant -> group count

    def __iter__(self):
        return iter(self.batches)

    def __len__(self):
        return len(self.batches)


def single_participant_batches(manifest, batch_size, seed, multi_participant=False):
    """Deterministic shuffled epoch plan.

    Per participant: shuffle its groups, emit floor(n/B) full batches, drop
    the remainder. Participants with fewer than B groups are skipped and
    counted in the stream summary. Batch order is shuffled across
    participants. ``multi_participant=True`` shuffles all groups globally
    instead (the identity-collapse ablation).
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    batches = []
    skipped = {}

    if multi_participant:
        keys = sorted(manifest.group_keys())
        order = rng.permutation(len(keys))
        shuffled = [keys[i] for i in order]
        for start in range(0, len(shuffled) - batch_size + 1, batch_size):
            batches.append(shuffled[start : start + batch_size])
    else:
        for participant in sorted(manifest.participants):
            keys = sorted(manifest.group_keys(participant))
            if len(keys) < batch_size:
                skipped[participant] = len(keys)
                continue
            order = rng.permutation(len(keys))
            shuffled = [keys[i] for i in order]
            for start in range(0, len(shuffled) - batch_size + 1, batch_size):
                batches.append(shuffled[start : start + batch_size])
        if batches:
            order = rng.permutation(len(batches))
            batches = [batches[i] for i in order]

    if skipped:
        logger.warning(
            "skipped %d participant(s) with fewer than %d groups: %s",
            len(skipped), batch_size, sorted(skipped),
        )
    return BatchStream(batches=batches, skipped=skipped)
