"""Identity-balanced P x K batch sampling."""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..errors import ConfigError


def pk_sample(pids, P: int, K: int, seed: int, epoch: int = 0) -> list[np.ndarray]:
    """Return one epoch of batches, each holding ``K`` indices for each of ``P`` distinct pids.

    Every pid's indices are shuffled and cut into chunks of ``K``; a pid with fewer
    than ``K`` images is topped up by sampling with replacement. Batches draw ``P``
    pids that still hold a chunk until fewer than ``P`` remain, so each pid lands in
    at least one batch.
    """
    pids = np.asarray(pids)
    by_pid = defaultdict(list)
    for idx, pid in enumerate(pids.tolist()):
        by_pid[pid].append(idx)
    if P < 1 or K < 1:
        raise ConfigError("P and K must be positive")
    if len(by_pid) < P:
        raise ConfigError(f"P={P} exceeds the {len(by_pid)} identities available")
    rng = np.random.default_rng([seed, epoch])
    chunks = {}
    for pid in sorted(by_pid):
        idxs = np.array(by_pid[pid])
        if len(idxs) < K:
            idxs = rng.choice(idxs, size=K, replace=True)
        idxs = rng.permutation(idxs)
        n = len(idxs) // K
        chunks[pid] = [idxs[i * K:(i + 1) * K] for i in range(n)]
    batches = []
    avail = [pid for pid in sorted(chunks) if chunks[pid]]
    while len(avail) >= P:
        chosen = rng.choice(len(avail), size=P, replace=False)
        picked = [avail[i] for i in sorted(chosen)]
        batches.append(np.concatenate([chunks[p].pop() for p in picked]))
        avail = [pid for pid in avail if chunks[pid]]
    if avail:
        others = [pid for pid in sorted(by_pid) if pid not in avail]
        extra = rng.choice(len(others), size=P - len(avail), replace=False)
        fill = []
        for i in sorted(extra):
            idxs = np.array(by_pid[others[i]])
            fill.append(rng.choice(idxs, size=K, replace=len(idxs) < K))
        batches.append(np.concatenate([chunks[p].pop() for p in avail] + fill))
    return batches


class PKSampler:
    def __init__(self, pids, P: int, K: int, seed: int = 0):
        self.pids = np.asarray(pids)
        self.P, self.K, self.seed = P, K, seed
        pk_sample(self.pids, P, K, seed)  # validate eagerly

    def epoch(self, epoch: int) -> list[np.ndarray]:
        return pk_sample(self.pids, self.P, self.K, self.seed, epoch)

    def __iter__(self):
        epoch = 0
        while True:
            yield from self.epoch(epoch)
            epoch += 1
