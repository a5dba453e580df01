"""Distances, gallery ranking and the cross-camera CMC / mAP protocol."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ContractError
from .rank import evaluate_ranked

SCHEMA_VERSION = 1
METRICS = ("cosine", "euclidean")


def distance_matrix(queries, gallery, metric: str = "cosine") -> np.ndarray:
    """``Q x G`` distances; ``cosine`` is ``1 - cos`` on L2-normalized rows."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ContractError(f"feature dims differ: {q.shape} vs {g.shape}")
    if metric == "cosine":
        qn = q / np.linalg.norm(q, axis=1, keepdims=True)
        gn = g / np.linalg.norm(g, axis=1, keepdims=True)
        return np.clip(1.0 - qn @ gn.T, 0.0, 2.0)
    if metric == "euclidean":
        sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2 * q @ g.T
        return np.sqrt(np.clip(sq, 0.0, None))
    raise ContractError(f"unknown metric {metric!r}")


def rank_order(distmat) -> np.ndarray:
    """Gallery indices per query by increasing distance, ties broken by index."""
    return np.argsort(np.asarray(distmat), axis=1, kind="stable")


@dataclass
class RankingResult:
    order: list          # per query: gallery indices after protocol exclusion
    matches: list        # per query: bool flags aligned with ``order``

    @classmethod
    def build(cls, distmat, q_pids, g_pids, q_camids, g_camids) -> "RankingResult":
        full = rank_order(distmat)
        g_pids, g_camids = np.asarray(g_pids), np.asarray(g_camids)
        orders, flags = [], []
        for q, o in enumerate(full):
            keep = ~((g_pids[o] == q_pids[q]) & (g_camids[o] == q_camids[q]))
            kept = o[keep]
            orders.append(kept)
            flags.append(g_pids[kept] == q_pids[q])
        return cls(orders, flags)


@dataclass
class MetricsReport:
    mAP: float
    cmc: dict
    per_query_ap: list
    n_queries: int
    n_excluded: int
    config: dict = field(default_factory=dict)
    checkpoint: str | None = None
    schema_version: int = SCHEMA_VERSION

    def rank(self, k: int) -> float:
        return self.cmc[k]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(open(path).read())
        validate_report(d)
        d["cmc"] = {int(k): v for k, v in d["cmc"].items()}
        return cls(**d)


def validate_report(d: dict) -> None:
    """Check a report dict against the version-1 schema."""
    required = {"mAP": float, "cmc": dict, "per_query_ap": list, "n_queries": int,
                "n_excluded": int, "config": dict, "schema_version": int}
    for key, typ in required.items():
        if key not in d:
            raise ContractError(f"report lacks {key!r}")
        if typ is float and not isinstance(d[key], (int, float)):
            raise ContractError(f"report field {key!r} must be numeric")
        if typ is not float and not isinstance(d[key], typ):
            raise ContractError(f"report field {key!r} must be {typ.__name__}")
    if d["schema_version"] != SCHEMA_VERSION:
        raise ContractError(f"unsupported schema version {d['schema_version']}")
    values = [d["mAP"], *d["cmc"].values(), *d["per_query_ap"]]
    if any(not 0.0 <= v <= 1.0 for v in values):
        raise ContractError("metrics must lie in [0, 1]")


def evaluate(distmat, q_pids, g_pids, q_camids, g_camids, ranks: Sequence[int] = (1, 5, 10),
             use_cython=None) -> MetricsReport:
    """CMC@k and mAP with same-pid-same-camera gallery entries excluded."""
    distmat = np.asarray(distmat)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_camids, g_camids = np.asarray(q_camids), np.asarray(g_camids)
    if distmat.shape != (len(q_pids), len(g_pids)):
        raise ContractError("distance matrix shape does not match the label arrays")
    max_rank = max(ranks)
    cmc, ap, valid = evaluate_ranked(rank_order(distmat), q_pids, g_pids, q_camids, g_camids,
                                     max_rank, use_cython=use_cython)
    n_excluded = int((~valid).sum())
    if n_excluded:
        warnings.warn(f"{n_excluded} queries have no valid gallery match and were excluded")
    if not valid.any():
        raise ContractError("no query has a valid gallery match")
    curve = cmc[valid].mean(0)
    return MetricsReport(
        mAP=float(ap[valid].mean()),
        cmc={int(k): float(curve[k - 1]) for k in ranks},
        per_query_ap=[float(a) for a in ap[valid]],
        n_queries=int(valid.sum()),
        n_excluded=n_excluded,
    )
