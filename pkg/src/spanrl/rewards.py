"""Reward functions for span extraction: string, location, label, semantic.

All functions are stateless and safe for concurrent use. The unified reward
is a weighted sum of the four components; weights default to 0.25 each.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .corpus import Document
    from .model import SpanAction


@dataclass(frozen=True)
class RewardWeights:
    """Per-component weights of the unified reward."""

    string: float = 0.25
    location: float = 0.25
    label: float = 0.25
    semantic: float = 0.25

    def __post_init__(self):
        for name in ("string", "location", "label", "semantic"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {name!r} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.string, self.location, self.label, self.semantic)


@dataclass(frozen=True)
class RewardBreakdown:
    """The four component rewards and their weighted total."""

    r_string: float
    r_location: float
    r_label: float
    r_semantic: float
    total: float

    @classmethod
    def from_components(
        cls,
        r_string: float,
        r_location: float,
        r_label: float,
        r_semantic: float,
        weights: RewardWeights,
    ) -> "RewardBreakdown":
        total = (
            weights.string * r_string
            + weights.location * r_location
            + weights.label * r_label
            + weights.semantic * r_semantic
        )
        return cls(r_string, r_location, r_label, r_semantic, total)

    def to_dict(self) -> dict:
        return {
            "r_string": self.r_string,
            "r_location": self.r_location,
            "r_label": self.r_label,
            "r_semantic": self.r_semantic,
            "total": self.total,
        }


def character_trigrams(s: str) -> list[str]:
    """Sliding character trigrams; a string shorter than 3 chars is one gram."""
    if not s:
        return []
    if len(s) < 3:
        return [s]
    return [s[i : i + 3] for i in range(len(s) - 2)]


def stable_bucket(gram: str, n_buckets: int) -> int:
    """Deterministic hash bucket for a gram (crc32, stable across runs)."""
    return zlib.crc32(gram.encode("utf-8")) % n_buckets


class StandInEncoder:
    """Deterministic sentence encoder: hashed trigram counts, L2-normalized.

    Stands in for a pretrained sentence encoder behind the same interface:
    encode(s) returns a fixed-size vector, unit-norm for non-empty s, and
    the zero vector for the empty string.
    """

    def __init__(self, hash_dim: int = 65536):
        if hash_dim < 1:
            raise ValueError(f"hash_dim must be >= 1, got {hash_dim}")
        self.hash_dim = hash_dim

    def encode(self, s: str) -> np.ndarray:
        vec = np.zeros(self.hash_dim, dtype=np.float64)
        for gram in character_trigrams(s):
            vec[stable_bucket(gram, self.hash_dim)] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        return vec

    def __call__(self, s: str) -> np.ndarray:
        return self.encode(s)


def levenshtein(a: str, b: str) -> int:
    """Unit-cost character edit distance (two-row dynamic programming)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        curr = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cost = 0 if ca == cb else 1
            curr[j] = min(prev[j] + 1, curr[j - 1] + 1, prev[j - 1] + cost)
        prev = curr
    return prev[-1]


def string_reward(y: str, y_hat: str) -> float:
    """Levenshtein-based similarity in [0, 1]; 1.0 when both strings empty.

    The raw edit distance is normalized by max string length so the reward
    is bounded and comparable with the other components.
    """
    if not y and not y_hat:
        return 1.0
    return 1.0 - levenshtein(y, y_hat) / max(len(y), len(y_hat))


def location_reward(a: "SpanAction", a_gt: "SpanAction") -> float:
    """Intersection-over-union of two inclusive token spans."""
    if a.start > a.end or a_gt.start > a_gt.end:
        raise ValueError(f"invalid span: {a} vs {a_gt}")
    inter = max(0, min(a.end, a_gt.end) - max(a.start, a_gt.start) + 1)
    len_a = a.end - a.start + 1
    len_gt = a_gt.end - a_gt.start + 1
    return inter / (len_a + len_gt - inter)


def majority_label(doc: "Document", a: "SpanAction") -> str:
    """Strictly most frequent tag among the span's tokens; ties give "other"."""
    counts: dict[str, int] = {}
    for tok in doc.tokens[a.start : a.end + 1]:
        counts[tok.tag] = counts.get(tok.tag, 0) + 1
    best = max(counts.values())
    winners = [tag for tag, c in counts.items() if c == best]
    return winners[0] if len(winners) == 1 else "other"


def label_reward(doc: "Document", a: "SpanAction", q: str) -> float:
    """+1 on tag match, 0 when the span is untargeted, -1 on a wrong field."""
    tag = majority_label(doc, a)
    if tag == q:
        return 1.0
    if tag == "other":
        return 0.0
    return -1.0


def semantic_reward(y: str, y_hat: str, enc: StandInEncoder) -> float:
    """Cosine similarity of the encoded strings; 0 if either encoding is zero."""
    ey = enc.encode(y)
    eh = enc.encode(y_hat)
    ny = np.linalg.norm(ey)
    nh = np.linalg.norm(eh)
    if ny == 0.0 or nh == 0.0:
        return 0.0
    return float(np.dot(ey, eh) / (ny * nh))


def span_text(doc: "Document", a: "SpanAction") -> str:
    """Answer string of an inclusive span: space-joined token texts."""
    return " ".join(tok.text for tok in doc.tokens[a.start : a.end + 1])


def unified_reward(
    doc: "Document",
    a: "SpanAction",
    a_gt: "SpanAction",
    q: str,
    weights: RewardWeights,
    enc: StandInEncoder,
) -> RewardBreakdown:
    """Weighted sum of the four component rewards for one extraction."""
    y = span_text(doc, a_gt)
    y_hat = span_text(doc, a)
    return RewardBreakdown.from_components(
        r_string=string_reward(y, y_hat),
        r_location=location_reward(a, a_gt),
        r_label=label_reward(doc, a, q),
        r_semantic=semantic_reward(y, y_hat, enc),
        weights=weights,
    )
