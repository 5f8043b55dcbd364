"""Layout-aware span extraction policy.

A small transformer encoder over (text, position, 2D box) token features,
plus a question-conditioned interaction head that emits start/end
distributions over token positions, and a value head for advantage
baselines. Everything runs in float64 on CPU: small enough for exact
finite-difference gradient checks, deterministic under a fixed seed.

All heavy paths are batched over padded documents with key masking; the
single-document operations are thin wrappers over the batched ones, so
both views of the model share one implementation.

Inference (encode/interact/decode) never mutates parameters and is safe to
run concurrently; parameter updates require exclusive access.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import Document
from .rewards import StandInEncoder, character_trigrams, stable_bucket

CHECKPOINT_VERSION = 1

DTYPE = torch.float64

NEG_INF = float("-inf")


class CheckpointError(Exception):
    """Unusable checkpoint: missing, corrupted, or wrong version."""


@dataclass(frozen=True)
class TextEmbeddingConfig:
    trigram_hash_dim: int = 4096


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_size: int = 64
    n_heads: int = 4
    max_seq_len: int = 128
    text_embedding: TextEmbeddingConfig = field(default_factory=TextEmbeddingConfig)
    seed: int = 0
    # Sizing knobs beyond the core dimensions; desk-scale defaults.
    question_hash_dim: int = 512
    n_box_buckets: int = 16
    ffn_multiplier: int = 4

    def __post_init__(self):
        if self.hidden_size % self.n_heads != 0:
            raise ValueError(
                f"hidden_size {self.hidden_size} not divisible by n_heads {self.n_heads}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        te = d.pop("text_embedding", {})
        return cls(text_embedding=TextEmbeddingConfig(**te), **d)


# Full-scale reference sizing (LayoutLM-base class backbone: 12 blocks,
# hidden 768, sequence length 512). Recorded for comparison; not meant to be
# instantiated on a desk CPU.
REFERENCE_FULL_SCALE_CONFIG = ModelConfig(
    n_layers=12,
    hidden_size=768,
    n_heads=12,
    max_seq_len=512,
    text_embedding=TextEmbeddingConfig(trigram_hash_dim=65536),
)


@dataclass
class SpanDistribution:
    """Start/end probability vectors over token positions (float64 tensors)."""

    start_probs: torch.Tensor
    end_probs: torch.Tensor

    def __post_init__(self):
        if self.start_probs.ndim != 1 or self.end_probs.ndim != 1:
            raise ValueError("probability vectors must be 1-D")

    def __len__(self) -> int:
        return self.start_probs.shape[0]

    @classmethod
    def from_arrays(cls, start_probs, end_probs) -> "SpanDistribution":
        return cls(
            torch.as_tensor(start_probs, dtype=DTYPE),
            torch.as_tensor(end_probs, dtype=DTYPE),
        )


@dataclass(frozen=True, order=True)
class SpanAction:
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid span ({self.start}, {self.end})")


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, hidden: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        b, length, _ = x.shape
        qkv = self.qkv(x).view(b, length, 3, self.n_heads, self.head_dim)
        q = qkv[:, :, 0].permute(0, 2, 1, 3)  # (b, heads, L, dh)
        k = qkv[:, :, 1].permute(0, 2, 1, 3)
        v = qkv[:, :, 2].permute(0, 2, 1, 3)
        scores = q @ k.transpose(-2, -1) / np.sqrt(self.head_dim)
        scores = scores.masked_fill(~key_mask[:, None, None, :], NEG_INF)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).permute(0, 2, 1, 3).reshape(b, length, -1)
        return self.out(ctx)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: self-attention then feed-forward."""

    def __init__(self, hidden: int, n_heads: int, ffn_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = MultiHeadSelfAttention(hidden, n_heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.ffn = nn.Sequential(
            nn.Linear(hidden, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, hidden)
        )

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), key_mask)
        x = x + self.ffn(self.ln2(x))
        return x


class SpanPolicy(nn.Module):
    """Policy network: document encoder + question interaction + value head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        h = config.hidden_size
        self.tok_embed = nn.Embedding(config.text_embedding.trigram_hash_dim, h)
        self.pos_embed = nn.Embedding(config.max_seq_len, h)
        self.box_embeds = nn.ModuleList(
            nn.Embedding(config.n_box_buckets, h) for _ in range(4)
        )
        self.blocks = nn.ModuleList(
            EncoderBlock(h, config.n_heads, config.ffn_multiplier * h)
            for _ in range(config.n_layers)
        )
        self.final_ln = nn.LayerNorm(h)

        self.question_proj = nn.Linear(config.question_hash_dim, h)
        self.cross_q = nn.Linear(h, h)
        self.cross_k = nn.Linear(h, h)
        self.cross_v = nn.Linear(h, h)
        self.fuse = nn.Linear(2 * h, h)
        self.start_scorer = nn.Linear(3 * h, 1)
        self.end_scorer = nn.Linear(3 * h, 1)
        self.value_hidden = nn.Linear(2 * h, h)
        self.value_out = nn.Linear(h, 1)

        self.to(DTYPE)
        self._init_parameters(config.seed)

        self.question_encoder = StandInEncoder(hash_dim=config.question_hash_dim)
        self._question_cache: dict[str, torch.Tensor] = {}
        self._feature_cache: dict[int, tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = {}
        self.truncation_count = 0

    def _init_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Linear, nn.Embedding)):
                    module.weight.normal_(0.0, 0.02, generator=gen)
                    if isinstance(module, nn.Linear) and module.bias is not None:
                        module.bias.zero_()
                elif isinstance(module, nn.LayerNorm):
                    module.weight.fill_(1.0)
                    module.bias.zero_()
            # Zero-initialized output layers: the initial policy is exactly
            # uniform and the initial value estimate is exactly zero.
            for head in (self.start_scorer, self.end_scorer, self.value_out):
                head.weight.zero_()
                head.bias.zero_()

    # -- document encoding ---------------------------------------------------

    def _doc_arrays(self, doc: Document) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-document integer feature arrays, cached by content fingerprint."""
        cached = self._feature_cache.get(doc.fingerprint)
        if cached is not None:
            return cached
        cfg = self.config
        n = min(len(doc.tokens), cfg.max_seq_len)
        grams = [
            [
                stable_bucket(g, cfg.text_embedding.trigram_hash_dim)
                for g in character_trigrams(tok.text)
            ]
            for tok in doc.tokens[:n]
        ]
        width = max(len(g) for g in grams)
        idx = torch.zeros(n, width, dtype=torch.long)
        gmask = torch.zeros(n, width, dtype=DTYPE)
        for j, g in enumerate(grams):
            idx[j, : len(g)] = torch.tensor(g, dtype=torch.long)
            gmask[j, : len(g)] = 1.0
        boxes = torch.tensor([doc.tokens[j].bbox for j in range(n)], dtype=torch.long)
        buckets = torch.clamp(boxes * cfg.n_box_buckets // 1001, 0, cfg.n_box_buckets - 1)
        if len(self._feature_cache) >= 8192:
            self._feature_cache.clear()
        self._feature_cache[doc.fingerprint] = (idx, gmask, buckets)
        return idx, gmask, buckets

    def _token_features(
        self, docs: list[Document]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Padded (batch, L, hidden) input features and a (batch, L) validity mask."""
        arrays = [self._doc_arrays(doc) for doc in docs]
        lens = [a[0].shape[0] for a in arrays]
        widths = [a[0].shape[1] for a in arrays]
        b, length, width = len(docs), max(lens), max(widths)
        idx = torch.zeros(b, length, width, dtype=torch.long)
        gmask = torch.zeros(b, length, width, dtype=DTYPE)
        buckets = torch.zeros(b, length, 4, dtype=torch.long)
        for i, (doc_idx, doc_gmask, doc_buckets) in enumerate(arrays):
            idx[i, : lens[i], : widths[i]] = doc_idx
            gmask[i, : lens[i], : widths[i]] = doc_gmask
            buckets[i, : lens[i]] = doc_buckets
        text = (self.tok_embed(idx) * gmask.unsqueeze(-1)).sum(dim=2)
        text = text / gmask.sum(dim=2, keepdim=True).clamp(min=1.0)

        pos = self.pos_embed(torch.arange(length)).unsqueeze(0)
        box = sum(self.box_embeds[c](buckets[:, :, c]) for c in range(4))
        mask = torch.arange(length).unsqueeze(0) < torch.tensor(lens).unsqueeze(1)
        return text + pos + box, mask

    def encode_batch(
        self, docs: list[Document]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Hidden states (batch, L, hidden) and validity mask for padded docs."""
        for doc in docs:
            if not doc.tokens:
                raise ValueError(f"document {doc.id} is empty")
            if len(doc.tokens) > self.config.max_seq_len:
                self.truncation_count += 1
        x, mask = self._token_features(docs)
        for block in self.blocks:
            x = block(x, mask)
        return self.final_ln(x), mask

    def encode_document(self, doc: Document) -> torch.Tensor:
        """Hidden states, one row per (possibly truncated) token."""
        hidden, _ = self.encode_batch([doc])
        return hidden[0]

    # -- question conditioning -----------------------------------------------

    def _raw_question(self, question: str) -> torch.Tensor:
        if not question:
            raise ValueError("question must be non-empty")
        raw = self._question_cache.get(question)
        if raw is None:
            raw = torch.from_numpy(self.question_encoder.encode(question))
            self._question_cache[question] = raw
        return raw

    def embed_questions(self, questions: list[str]) -> torch.Tensor:
        """Frozen sentence encodings projected to hidden size (projection trains)."""
        raw = torch.stack([self._raw_question(q) for q in questions])
        return self.question_proj(raw)

    def embed_question(self, question: str) -> torch.Tensor:
        return self.embed_questions([question])[0]

    def _cross_attend(
        self, hidden: torch.Tensor, mask: torch.Tensor, e_q: torch.Tensor
    ) -> torch.Tensor:
        q = self.cross_q(e_q)  # (p, h)
        k = self.cross_k(hidden)  # (p, L, h)
        v = self.cross_v(hidden)
        scores = (k @ q.unsqueeze(-1)).squeeze(-1) / np.sqrt(self.config.hidden_size)
        scores = scores.masked_fill(~mask, NEG_INF)
        attn = torch.softmax(scores, dim=-1)
        return (attn.unsqueeze(1) @ v).squeeze(1)

    def interact_batch(
        self, hidden: torch.Tensor, mask: torch.Tensor, e_q: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Start/end probabilities (p, L); padded positions get probability 0."""
        ctx = self._cross_attend(hidden, mask, e_q)
        u = torch.tanh(self.fuse(torch.cat([e_q, ctx], dim=-1)))
        feats = torch.cat(
            [hidden, u.unsqueeze(1).expand_as(hidden), hidden * u.unsqueeze(1)], dim=-1
        )
        start_logits = self.start_scorer(feats).squeeze(-1).masked_fill(~mask, NEG_INF)
        end_logits = self.end_scorer(feats).squeeze(-1).masked_fill(~mask, NEG_INF)
        return torch.softmax(start_logits, dim=-1), torch.softmax(end_logits, dim=-1)

    def interact(self, hidden: torch.Tensor, e_q: torch.Tensor) -> SpanDistribution:
        """Question-conditioned start/end distributions for one document."""
        mask = torch.ones(1, hidden.shape[0], dtype=torch.bool)
        start, end = self.interact_batch(hidden.unsqueeze(0), mask, e_q.unsqueeze(0))
        return SpanDistribution(start[0], end[0])

    def value_batch(
        self, hidden: torch.Tensor, mask: torch.Tensor, e_q: torch.Tensor
    ) -> torch.Tensor:
        """State values (p,) from the attention-pooled (hidden, question) pairs."""
        ctx = self._cross_attend(hidden, mask, e_q)
        z = torch.tanh(self.value_hidden(torch.cat([e_q, ctx], dim=-1)))
        return self.value_out(z).squeeze(-1)

    def value_estimate(self, hidden: torch.Tensor, e_q: torch.Tensor) -> torch.Tensor:
        mask = torch.ones(1, hidden.shape[0], dtype=torch.bool)
        return self.value_batch(hidden.unsqueeze(0), mask, e_q.unsqueeze(0))[0]

    def distribution_for(self, doc: Document, question: str) -> SpanDistribution:
        return self.interact(self.encode_document(doc), self.embed_question(question))


# ---------------------------------------------------------------------------
# Decoding and sampling
# ---------------------------------------------------------------------------


def greedy_decode(dist: SpanDistribution) -> SpanAction:
    """Argmax start, then argmax end restricted to end >= start; first index wins ties."""
    start_probs = dist.start_probs.detach().numpy()
    end_probs = dist.end_probs.detach().numpy()
    start = int(np.argmax(start_probs))
    end = start + int(np.argmax(end_probs[start:]))
    return SpanAction(start=start, end=end)


def _normalized(p: np.ndarray) -> np.ndarray:
    total = p.sum()
    if total <= 0.0:
        return np.full_like(p, 1.0 / len(p))
    return p / total


def sample_action(
    dist: SpanDistribution, rng: np.random.Generator
) -> tuple[SpanAction, float]:
    """Sample start, then end conditioned on end >= start (renormalized tail).

    Returns the action and its joint log-probability
    log p(start) + log p(end | end >= start).
    """
    start_probs = dist.start_probs.detach().numpy()
    end_probs = dist.end_probs.detach().numpy()
    n = len(start_probs)
    p_start = _normalized(start_probs)
    start = int(rng.choice(n, p=p_start))
    tail = _normalized(end_probs[start:])
    end = start + int(rng.choice(n - start, p=tail))
    log_prob = float(np.log(max(p_start[start], 1e-300)) + np.log(max(tail[end - start], 1e-300)))
    return SpanAction(start=start, end=end), log_prob


def span_log_prob(dist: SpanDistribution, action: SpanAction) -> torch.Tensor:
    """Differentiable log-probability under the same conditional convention."""
    tiny = torch.tensor(1e-300, dtype=DTYPE)
    p_start = dist.start_probs[action.start]
    tail = dist.end_probs[action.start :].sum()
    p_end = dist.end_probs[action.end]
    return (
        torch.log(torch.maximum(p_start, tiny))
        + torch.log(torch.maximum(p_end, tiny))
        - torch.log(torch.maximum(tail, tiny))
    )


def span_joint_probs(dist: SpanDistribution) -> np.ndarray:
    """Matrix of joint probabilities p(s) * p(e | e >= s); zero where e < s."""
    p_start = _normalized(dist.start_probs.detach().numpy())
    p_end = dist.end_probs.detach().numpy()
    n = len(p_start)
    joint = np.zeros((n, n))
    for s in range(n):
        tail = _normalized(p_end[s:])
        joint[s, s:] = p_start[s] * tail
    return joint


def top_k_candidates(
    dist: SpanDistribution, k: int, rng: np.random.Generator, max_attempts: int = 10_000
) -> list[SpanAction]:
    """k distinct sampled spans, padded with the most probable unseen spans.

    Result is ordered by descending joint probability. If the document is too
    short to host k distinct valid spans, all valid spans are returned.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = len(dist)
    k_eff = min(k, n * (n + 1) // 2)
    seen: dict[SpanAction, None] = {}
    attempts = 0
    while len(seen) < k_eff and attempts < max_attempts:
        action, _ = sample_action(dist, rng)
        seen.setdefault(action, None)
        attempts += 1

    joint = span_joint_probs(dist)
    if len(seen) < k_eff:
        order = np.argsort(-joint, axis=None, kind="stable")
        for flat in order:
            s, e = divmod(int(flat), n)
            if e < s:
                continue
            action = SpanAction(s, e)
            if action not in seen:
                seen[action] = None
            if len(seen) == k_eff:
                break

    return sorted(seen, key=lambda a: (-joint[a.start, a.end], a.start, a.end))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: SpanPolicy, path: str | Path) -> Path:
    """Single-file container: JSON manifest plus raw little-endian float64 tensors."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    blob = io.BytesIO()
    tensors = []
    for name, tensor in state.items():
        raw = tensor.detach().numpy().astype("<f8").tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        blob.write(raw)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": tensors,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True, indent=1))
        zf.writestr("tensors.bin", blob.getvalue())
    return path


def load_checkpoint(path: str | Path) -> SpanPolicy:
    """Rebuild the policy bit-exactly; refuses bad versions and corrupt data."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            blob = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e

    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')!r} != supported {CHECKPOINT_VERSION}"
        )
    config = ModelConfig.from_dict(manifest["config"])
    model = SpanPolicy(config)
    state = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = blob[offset : offset + 8 * count]
        offset += 8 * count
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"digest mismatch for tensor {entry['name']!r} in {path}")
        array = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        state[entry["name"]] = torch.from_numpy(array)
    model.load_state_dict(state)
    return model


def clone_policy(model: SpanPolicy) -> SpanPolicy:
    """Independent copy with identical parameters (fresh buffers, no grads)."""
    twin = SpanPolicy(model.config)
    twin.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return twin
