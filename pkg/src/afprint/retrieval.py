"""Song identification by segment-level majority voting, and Top-1 hit scoring."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dsp import HOP_S, AudioBuffer, SegmentRef, segment_matrix
from .pqindex import FingerprintIndex

# maps a stack of 1 s waveforms (n, samples) to unit-norm embeddings (n, D)
Embedder = Callable[[np.ndarray], np.ndarray]

MATCH_TOLERANCE_S = 0.5


@dataclass
class QueryResult:
    winner: Optional[int]
    votes: Dict[int, int]
    per_segment: List[List[Tuple[SegmentRef, float]]]
    tie_broken: bool = False

    def to_dict(self) -> dict:
        return {
            "winner": self.winner,
            "votes": {str(k): v for k, v in sorted(self.votes.items())},
            "tie_broken": self.tie_broken,
            "per_segment": [
                {"segment": i,
                 "neighbors": [{"song_id": r.song_id, "segment_index": r.segment_index, "distance": d}
                               for r, d in hits]}
                for i, hits in enumerate(self.per_segment)
            ],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


@dataclass(frozen=True)
class HitJudgment:
    hit: bool
    predicted: Optional[SegmentRef]
    truth: Tuple[int, float]


def vote(per_segment: Sequence[Sequence[Tuple[SegmentRef, float]]]) -> QueryResult:
    """Every neighbour casts one vote for its song.

    The most-voted song wins; ties go to the smaller mean distance and then
    to the lower song id.
    """
    votes: Dict[int, int] = defaultdict(int)
    dist_sum: Dict[int, float] = defaultdict(float)
    for hits in per_segment:
        for ref, d in hits:
            votes[ref.song_id] += 1
            dist_sum[ref.song_id] += d
    if not votes:
        return QueryResult(None, {}, [list(h) for h in per_segment])
    best = max(votes.values())
    leaders = [s for s, v in votes.items() if v == best]
    winner = min(leaders, key=lambda s: (dist_sum[s] / votes[s], s))
    return QueryResult(winner, dict(votes), [list(h) for h in per_segment], len(leaders) > 1)


def identify(query_audio: AudioBuffer, index: FingerprintIndex, embedder: Embedder,
             top_k: int = 4) -> QueryResult:
    """Embed every 1 s / 0.5 s-hop segment, search ``top_k`` each, majority-vote."""
    if len(index) == 0:
        raise ValueError("cannot identify against an empty index")
    segments = segment_matrix(query_audio)
    hits = index.search_batch(embedder(segments), top_k)
    return vote(hits)


def judge_top1(query_segment: AudioBuffer, index: FingerprintIndex, embedder: Embedder,
               truth: Tuple[int, float]) -> HitJudgment:
    """Single nearest neighbour; a hit needs the right song within +-0.5 s (inclusive)."""
    if len(index) == 0:
        raise ValueError("cannot judge against an empty index")
    hits = index.search_batch(embedder(query_segment.samples[None, :]), 1)[0]
    return judge_neighbor(hits[0][0] if hits else None, truth)


def judge_neighbor(predicted: Optional[SegmentRef], truth: Tuple[int, float]) -> HitJudgment:
    song, start = truth
    hit = (predicted is not None and predicted.song_id == song
           and abs(predicted.segment_index * HOP_S - start) <= MATCH_TOLERANCE_S + 1e-9)
    return HitJudgment(bool(hit), predicted, (song, start))


def top1_hit_rate(judgments: Sequence[HitJudgment]) -> float:
    """``100 * hits / (hits + misses)``."""
    if not judgments:
        raise ValueError("no judgments to score")
    hits = sum(1 for j in judgments if j.hit)
    return 100.0 * hits / (hits + (len(judgments) - hits))
