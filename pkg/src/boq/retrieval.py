"""Descriptor indexing, exact top-k search, ground-truth matching, and
recall@k computation.

Search is exact brute force over inner products (descriptors are unit norm,
so inner product equals cosine similarity). Ties are broken by ascending
record id so results are deterministic across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ManifestError

EARTH_RADIUS_M = 6_371_000.0


@dataclass
class DescriptorIndex:
    """An R x D matrix of unit-norm descriptors with parallel record ids."""

    matrix: np.ndarray
    ids: list[str]
    positions: Optional[dict[str, tuple]] = None

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise DimensionError(f"index matrix must be 2-D, got {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise DimensionError(
                f"{len(self.ids)} ids for {self.matrix.shape[0]} descriptor rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("descriptor ids must be unique")
        if self.matrix.shape[0]:
            norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > 1e-4:
                raise ContractError(
                    f"index rows must be unit norm within 1e-4 (worst off by {worst:.2e})"
                )

    def __len__(self) -> int:
        return self.matrix.shape[0]


def top_k(index: DescriptorIndex, query: np.ndarray, k: int) -> list[str]:
    """Ids of the k largest inner products, descending; ties by ascending id.

    k larger than the index size returns everything.
    """
    if len(index) == 0:
        raise ContractError("top_k on an empty index")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.matrix.shape[1],):
        raise DimensionError(
            f"query shape {query.shape} does not match index dim {index.matrix.shape[1]}"
        )
    scores = index.matrix.astype(np.float64) @ query
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    return [index.ids[i] for i in order[:k]]


def haversine_m(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on a spherical Earth."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = math.radians(lat2 - lat1)
    dlam = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def match_by_distance(
    query_pos: tuple,
    ref_positions: Mapping[str, tuple],
    threshold_m: float,
    kind: str,
) -> set[str]:
    """Reference ids within ``threshold_m`` of the query position.

    kind "xy" uses planar Euclidean distance in meters; kind "latlon" uses
    the haversine distance.
    """
    if threshold_m <= 0:
        raise ContractError(f"threshold must be positive, got {threshold_m}")
    if kind == "xy":
        qx, qy = query_pos
        return {
            rid
            for rid, (x, y) in ref_positions.items()
            if math.hypot(x - qx, y - qy) <= threshold_m
        }
    if kind == "latlon":
        qlat, qlon = query_pos
        return {
            rid
            for rid, (lat, lon) in ref_positions.items()
            if haversine_m(qlat, qlon, lat, lon) <= threshold_m
        }
    raise ManifestError(f"unknown coordinate kind '{kind}'")


def match_by_frame(
    query_frame: int, ref_frames: Mapping[str, int], frame_threshold: int
) -> set[str]:
    """Reference ids whose frame index is within ``frame_threshold``."""
    if frame_threshold < 0:
        raise ContractError(f"frame threshold must be >= 0, got {frame_threshold}")
    return {
        rid for rid, f in ref_frames.items() if abs(int(f) - int(query_frame)) <= frame_threshold
    }


@dataclass
class GroundTruth:
    """Correct reference ids per query, plus the rule that produced them."""

    correct: dict[str, set[str]]
    rule: str


@dataclass
class EvalResult:
    recalls: dict[int, float]
    per_query: list[tuple[str, list[str]]]  # (query id, ranked prediction ids)
    evaluated_queries: int
    empty_gt_queries: int = 0
    empty_gt_ids: list[str] = field(default_factory=list)


def recall_at_k(
    per_query_topk: Sequence[tuple[str, list[str]]],
    ground_truth: GroundTruth,
    ks: Sequence[int],
) -> EvalResult:
    """Fraction of queries whose top-k intersects their correct set.

    Queries with empty correct sets are excluded from the denominator and
    reported separately. Recall is non-decreasing in k by construction.
    """
    ks = list(ks)
    if ks != sorted(ks) or any(k < 1 for k in ks):
        raise ContractError(f"ks must be ascending positive ints, got {ks}")
    empty_ids = []
    hits = {k: 0 for k in ks}
    evaluated = 0
    for qid, preds in per_query_topk:
        correct = ground_truth.correct.get(qid, set())
        if not correct:
            empty_ids.append(qid)
            continue
        evaluated += 1
        for k in ks:
            if any(p in correct for p in preds[:k]):
                hits[k] += 1
    recalls = {
        k: (hits[k] / evaluated if evaluated else 0.0) for k in ks
    }
    return EvalResult(
        recalls=recalls,
        per_query=list(per_query_topk),
        evaluated_queries=evaluated,
        empty_gt_queries=len(empty_ids),
        empty_gt_ids=empty_ids,
    )


def build_ground_truth(
    query_positions: Mapping[str, tuple],
    ref_positions: Mapping[str, tuple],
    gt_kind: str,
    threshold: float,
) -> GroundTruth:
    """Apply the matching rule implied by the manifest's ground-truth kind."""
    correct: dict[str, set[str]] = {}
    if gt_kind == "frame":
        frames = {rid: pos[0] for rid, pos in ref_positions.items()}
        for qid, pos in query_positions.items():
            correct[qid] = match_by_frame(pos[0], frames, int(threshold))
        rule = f"frame threshold {int(threshold)}"
    else:
        for qid, pos in query_positions.items():
            correct[qid] = match_by_distance(pos, ref_positions, threshold, gt_kind)
        rule = f"{gt_kind} threshold {threshold} m"
    return GroundTruth(correct=correct, rule=rule)


def evaluate(
    query_index: DescriptorIndex,
    ref_index: DescriptorIndex,
    ground_truth: GroundTruth,
    ks: Sequence[int],
) -> EvalResult:
    """Run every query against the reference index and score recall@k."""
    kmax = min(max(ks), len(ref_index))
    per_query = [
        (qid, top_k(ref_index, query_index.matrix[i], kmax))
        for i, qid in enumerate(query_index.ids)
    ]
    return recall_at_k(per_query, ground_truth, ks)


def format_results(result: EvalResult, ks: Sequence[int]) -> str:
    """Text table of ranked predictions plus a recall summary block."""
    kmax = max(ks)
    lines = ["query_id," + ",".join(f"rank{i}_id" for i in range(1, kmax + 1))]
    for qid, preds in result.per_query:
        padded = list(preds[:kmax]) + [""] * (kmax - len(preds[:kmax]))
        lines.append(",".join([qid, *padded]))
    lines.append("")
    for k in ks:
        lines.append(f"recall@{k}={result.recalls[k]:.4f}")
    lines.append(f"evaluated_queries={result.evaluated_queries}")
    lines.append(f"empty_ground_truth_queries={result.empty_gt_queries}")
    return "\n".join(lines) + "\n"
