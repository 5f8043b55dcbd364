"""Human-in-the-loop feedback: candidate serving, selection rewards, updates.

A feedback run samples document sets from the dev split (train when dev is
empty). Each session walks one set: every (document, question) item is
served once per interaction round as a five-candidate choice plus the
"no good options" sentinel; after a round completes, the accumulated
selections drive one policy update and a test-split evaluation.

Served items and selections append to a JSONL log; replaying the log
reconstructs the exact session state, including the update lineage.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import Corpus, Document, retag_tokens
from .evaluation import evaluate
from .model import (
    SpanAction,
    SpanDistribution,
    SpanPolicy,
    clone_policy,
    span_joint_probs,
    top_k_candidates,
)
from .ppo import PPOConfig, RewardConfig, Trajectory, Transition, compute_advantages, surrogate_terms
from .rewards import RewardBreakdown, unified_reward
from .sl import TrainingDiverged

NO_GOOD = "NO_GOOD"

NO_GOOD_REWARD = -0.25

EXPERT_THRESHOLD = 0.3


class FeedbackError(Exception):
    """Invalid interaction with the feedback loop."""


@dataclass(frozen=True)
class Candidate:
    action: SpanAction
    text: str
    prob: float
    log_prob: float


@dataclass
class CandidateSet:
    item_id: str
    doc_id: str
    question: str
    candidates: list[Candidate]
    value_old: float

    def to_wire(self, doc: Document) -> dict:
        return {
            "item_id": self.item_id,
            "question": self.question,
            "tokens": [{"text": t.text, "bbox": list(t.bbox)} for t in doc.tokens],
            "candidates": [
                {"start": c.action.start, "end": c.action.end, "text": c.text, "prob": c.prob}
                for c in self.candidates
            ],
        }


@dataclass(frozen=True)
class Selection:
    item_id: str
    choice: int | str  # candidate index or NO_GOOD
    timestamp: float
    rater_id: str = "expert"


@dataclass
class FeedbackItem:
    candidate_set: CandidateSet
    round_index: int
    selection: Selection | None = None
    consumed: bool = False


def propose_candidates(
    model: SpanPolicy, doc: Document, question: str, rng: np.random.Generator, k: int = 5
) -> CandidateSet:
    """Top-k sampled candidate spans with strings, probabilities and values."""
    if not doc.tokens:
        raise FeedbackError(f"document {doc.id} is empty")
    with torch.no_grad():
        hidden = model.encode_document(doc)
        e_q = model.embed_question(question)
        dist = model.interact(hidden, e_q)
        value = float(model.value_estimate(hidden, e_q))
    actions = top_k_candidates(dist, k, rng)
    joint = span_joint_probs(dist)
    candidates = []
    for action in actions:
        prob = float(joint[action.start, action.end])
        candidates.append(
            Candidate(
                action=action,
                text=doc.text_slice(action.start, action.end),
                prob=prob,
                log_prob=min(float(np.log(max(prob, 1e-300))), 0.0),
            )
        )
    return CandidateSet(
        item_id="", doc_id=doc.id, question=question, candidates=candidates, value_old=value
    )


def reward_from_selection(
    doc: Document,
    candidate_set: CandidateSet,
    selection: Selection,
    reward_config: RewardConfig,
) -> list[tuple[Candidate, RewardBreakdown | None, float]]:
    """Score every shown candidate against the expert's choice.

    A selected candidate acts as pseudo ground truth: its span provides the
    location/label targets (tokens inside it are treated as tagged with the
    question field) and its text the string/semantic targets. The sentinel
    gives every candidate a flat penalty instead.
    """
    if selection.choice == NO_GOOD:
        return [(c, None, NO_GOOD_REWARD) for c in candidate_set.candidates]
    if not isinstance(selection.choice, int) or not (
        0 <= selection.choice < len(candidate_set.candidates)
    ):
        raise FeedbackError(f"choice {selection.choice!r} out of range")
    chosen = candidate_set.candidates[selection.choice]
    pseudo = retag_tokens(doc, chosen.action.start, chosen.action.end, candidate_set.question)
    scored = []
    for cand in candidate_set.candidates:
        breakdown = unified_reward(
            pseudo,
            cand.action,
            chosen.action,
            candidate_set.question,
            reward_config.weights,
            reward_config.encoder,
        )
        scored.append((cand, breakdown, breakdown.total))
    return scored


def simulate_expert(
    doc: Document,
    candidate_set: CandidateSet,
    reward_config: RewardConfig,
    threshold: float = EXPERT_THRESHOLD,
) -> Selection:
    """Oracle rater: best candidate by true-annotation reward, or the sentinel.

    Ties resolve to the lowest candidate index; when even the best candidate
    scores below the threshold the sentinel is chosen.
    """
    ann = doc.annotations.get(candidate_set.question)
    if ann is None:
        raise FeedbackError(
            f"document {doc.id} has no annotation for {candidate_set.question!r}"
        )
    gt = SpanAction(ann.start, ann.end)
    totals = [
        unified_reward(
            doc, c.action, gt, candidate_set.question, reward_config.weights, reward_config.encoder
        ).total
        for c in candidate_set.candidates
    ]
    best = int(np.argmax(totals))
    choice: int | str = best if totals[best] >= threshold else NO_GOOD
    return Selection(
        item_id=candidate_set.item_id,
        choice=choice,
        timestamp=time.time(),
        rater_id="simulated",
    )


def apply_feedback_update(
    model: SpanPolicy,
    docs_by_id: dict[str, Document],
    pending: list[tuple[FeedbackItem, list[tuple[Candidate, RewardBreakdown | None, float]]]],
    ppo_config: PPOConfig,
) -> tuple[SpanPolicy, float]:
    """One update round over the pending feedback transitions.

    Every scored candidate becomes a single-step trajectory. Returns the
    updated policy and the mean reward consumed; with no pending feedback the
    policy is returned unchanged.
    """
    trajectories = []
    for item, scored in pending:
        cs = item.candidate_set
        for cand, breakdown, reward in scored:
            transition = Transition(
                doc_id=cs.doc_id,
                question=cs.question,
                action=cand.action,
                reward=reward,
                log_prob_old=cand.log_prob,
                value_old=cs.value_old,
                timestep=0,
                breakdown=breakdown,
            )
            trajectories.append(Trajectory(doc_id=cs.doc_id, transitions=[transition]))
    if not trajectories:
        return model, 0.0

    model = clone_policy(model)
    optimizer = torch.optim.Adam(model.parameters(), lr=ppo_config.learning_rate)
    transitions = [tr for traj in trajectories for tr in traj.transitions]
    estimate = compute_advantages(
        trajectories,
        ppo_config.gamma,
        ppo_config.gae_lambda,
        normalize=ppo_config.normalize_advantages,
    )
    for _ in range(ppo_config.optim_epochs_per_batch):
        terms = surrogate_terms(model, docs_by_id, transitions, estimate, ppo_config.clip_epsilon)
        loss = -terms.surrogate + ppo_config.value_loss_coef * terms.value_loss
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite feedback loss; rewards={[t.reward for t in transitions]}"
            )
        model.zero_grad()
        loss.backward()
        optimizer.step()
    return model, float(np.mean([t.reward for t in transitions]))


# ---------------------------------------------------------------------------
# Session management
# ---------------------------------------------------------------------------


@dataclass
class FeedbackSession:
    session_id: str
    set_index: int
    doc_ids: list[str]
    questions: list[str]
    interactions_total: int
    round_index: int = 0
    cursor: int = 0
    items: dict[str, FeedbackItem] = field(default_factory=dict)
    round_item_ids: list[str] = field(default_factory=list)
    start_f1: float = 0.0
    complete: bool = False

    @property
    def n_items(self) -> int:
        return len(self.doc_ids) * len(self.questions)


class FeedbackLoop:
    """Drives sessions over pre-sampled document sets against one policy.

    Each session restarts from the initial checkpoint, mirroring independent
    per-set runs. All serving randomness is derived statelessly from
    (seed, set, round, item) so a replayed log lands in an identical state.
    """

    def __init__(
        self,
        corpus: Corpus,
        model: SpanPolicy,
        ppo_config: PPOConfig,
        reward_config: RewardConfig,
        sets: int = 5,
        docs_per_set: int = 4,
        interactions: int = 3,
        seed: int = 0,
        log_path: str | Path | None = None,
    ):
        self.corpus = corpus
        self.initial_state = {k: v.clone() for k, v in model.state_dict().items()}
        self.model = clone_policy(model)
        self.ppo_config = ppo_config
        self.reward_config = reward_config
        self.sets = sets
        self.docs_per_set = docs_per_set
        self.interactions = interactions
        self.seed = seed
        self.log_path = Path(log_path) if log_path else None

        pool = corpus.dev if corpus.dev else corpus.train
        needed = sets * docs_per_set
        if len(pool) < needed:
            raise FeedbackError(
                f"need {needed} documents for {sets} sets of {docs_per_set}, "
                f"pool has {len(pool)}"
            )
        rng = np.random.Generator(np.random.PCG64(seed))
        picked = rng.choice(len(pool), size=needed, replace=False)
        self.set_docs: list[list[Document]] = [
            [pool[int(i)] for i in picked[s * docs_per_set : (s + 1) * docs_per_set]]
            for s in range(sets)
        ]
        self.docs_by_id = {d.id: d for docs in self.set_docs for d in docs}
        self.train_docs_by_id = {d.id: d for d in corpus.train}

        self.sessions: dict[str, FeedbackSession] = {}
        self.active_session_id: str | None = None
        self.next_set_index = 0
        self.history: list[dict] = []
        self.start_f1: float | None = None

        if self.log_path is not None and self.log_path.exists():
            self._replay_log()

    # -- logging ------------------------------------------------------------

    def _log(self, record: dict) -> None:
        if self.log_path is None:
            return
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def _replay_log(self) -> None:
        with open(self.log_path, encoding="utf-8") as f:
            records = [json.loads(line) for line in f if line.strip()]
        log_path = self.log_path
        self.log_path = None  # replay must not re-append
        try:
            for rec in records:
                if rec["type"] == "session_start":
                    self.start_session()
                elif rec["type"] == "selection":
                    session = self.sessions[rec["session_id"]]
                    # Re-serve up to the recorded item, then apply the choice.
                    while rec["item_id"] not in session.items:
                        served = self.next_item(rec["session_id"])
                        if served is None:
                            raise FeedbackError(
                                f"log replay: item {rec['item_id']} never served"
                            )
                    choice = rec["choice"]
                    self.submit_selection(
                        rec["session_id"], rec["item_id"], choice, rater_id=rec["rater_id"]
                    )
                elif rec["type"] == "update":
                    self.apply_update(rec["session_id"])
        finally:
            self.log_path = log_path

    # -- session lifecycle ----------------------------------------------------

    def test_f1(self) -> float:
        return evaluate(self.model, self.corpus.test, self.corpus.schema).f1

    def start_session(self) -> FeedbackSession:
        if self.active_session_id is not None:
            session = self.sessions[self.active_session_id]
            if not session.complete:
                return session
        if self.next_set_index >= self.sets:
            raise FeedbackError("all document sets are exhausted")
        set_index = self.next_set_index
        self.next_set_index += 1
        # Every set starts from the same initial checkpoint.
        self.model = clone_policy(self.model)
        self.model.load_state_dict({k: v.clone() for k, v in self.initial_state.items()})
        session = FeedbackSession(
            session_id=f"set{set_index}",
            set_index=set_index,
            doc_ids=[d.id for d in self.set_docs[set_index]],
            questions=list(self.corpus.schema.fields),
            interactions_total=self.interactions,
            start_f1=self.test_f1(),
        )
        if self.start_f1 is None:
            self.start_f1 = session.start_f1
        self.sessions[session.session_id] = session
        self.active_session_id = session.session_id
        self._begin_round(session)
        self._log(
            {
                "type": "session_start",
                "session_id": session.session_id,
                "set_index": set_index,
                "doc_ids": session.doc_ids,
                "start_f1": session.start_f1,
            }
        )
        return session

    def _begin_round(self, session: FeedbackSession) -> None:
        session.round_item_ids = [
            f"{session.session_id}-r{session.round_index}-i{i}"
            for i in range(session.n_items)
        ]
        session.cursor = 0

    def get_session(self, session_id: str) -> FeedbackSession:
        session = self.sessions.get(session_id)
        if session is None:
            raise FeedbackError(f"unknown session {session_id!r}")
        return session

    def next_item(self, session_id: str) -> FeedbackItem | None:
        """Next unanswered item of the current round; None when the round is done."""
        session = self.get_session(session_id)
        if session.complete or session.cursor >= session.n_items:
            return None
        index = session.cursor
        item_id = session.round_item_ids[index]
        item = session.items.get(item_id)
        if item is None:
            doc = self.docs_by_id[session.doc_ids[index // len(session.questions)]]
            question = session.questions[index % len(session.questions)]
            rng = np.random.Generator(
                np.random.PCG64(
                    np.random.SeedSequence(
                        (self.seed, session.set_index, session.round_index, index)
                    )
                )
            )
            candidate_set = propose_candidates(self.model, doc, question, rng)
            candidate_set.item_id = item_id
            item = FeedbackItem(candidate_set=candidate_set, round_index=session.round_index)
            session.items[item_id] = item
            self._log(
                {
                    "type": "served",
                    "session_id": session_id,
                    "item_id": item_id,
                    "round": session.round_index,
                    "doc_id": candidate_set.doc_id,
                    "question": question,
                    "candidates": [
                        {
                            "start": c.action.start,
                            "end": c.action.end,
                            "text": c.text,
                            "prob": c.prob,
                        }
                        for c in candidate_set.candidates
                    ],
                }
            )
        return item

    def submit_selection(
        self, session_id: str, item_id: str, choice: int | str, rater_id: str = "expert"
    ) -> int:
        """Record a choice for a served, unanswered item; returns pending count."""
        session = self.get_session(session_id)
        item = session.items.get(item_id)
        if item is None:
            raise FeedbackError(f"item {item_id!r} was never served")
        if item.selection is not None:
            raise FeedbackError(f"item {item_id!r} already answered")
        if choice != NO_GOOD and not (
            isinstance(choice, int) and 0 <= choice < len(item.candidate_set.candidates)
        ):
            raise FeedbackError(f"choice {choice!r} invalid for item {item_id!r}")
        item.selection = Selection(
            item_id=item_id, choice=choice, timestamp=time.time(), rater_id=rater_id
        )
        if session.round_item_ids[session.cursor] == item_id:
            session.cursor += 1
        self._log(
            {
                "type": "selection",
                "session_id": session_id,
                "item_id": item_id,
                "choice": choice,
                "rater_id": rater_id,
            }
        )
        return self.pending_count(session)

    def pending_count(self, session: FeedbackSession) -> int:
        return sum(
            1
            for item in session.items.values()
            if item.selection is not None and not item.consumed
        )

    def apply_update(self, session_id: str) -> dict:
        """Consume answered items into one policy update; evaluate before/after."""
        session = self.get_session(session_id)
        pending = [
            (item, reward_from_selection(
                self.docs_by_id[item.candidate_set.doc_id],
                item.candidate_set,
                item.selection,
                self.reward_config,
            ))
            for item in session.items.values()
            if item.selection is not None and not item.consumed
        ]
        f1_before = self.test_f1()
        self.model, mean_reward = apply_feedback_update(
            self.model, self.docs_by_id, pending, self.ppo_config
        )
        f1_after = self.test_f1()
        for item, _ in pending:
            item.consumed = True

        interaction = session.round_index + 1
        record = {
            "session_id": session_id,
            "set_index": session.set_index,
            "interaction": interaction,
            "test_f1_before": f1_before,
            "test_f1_after": f1_after,
            "mean_reward": mean_reward,
            "n_transitions": sum(len(scored) for _, scored in pending),
        }
        self.history.append(record)
        self._log({"type": "update", **record})

        if session.cursor >= session.n_items:
            session.round_index += 1
            if session.round_index >= session.interactions_total:
                session.complete = True
            else:
                self._begin_round(session)
        return record

    def metrics(self) -> dict:
        return {"start_f1": self.start_f1, "history": list(self.history)}


def run_simulated_feedback(loop: FeedbackLoop, log=None) -> dict:
    """Drive every document set with the simulated expert; returns metrics."""
    for _ in range(loop.next_set_index, loop.sets):
        session = loop.start_session()
        while not session.complete:
            item = loop.next_item(session.session_id)
            if item is None:
                record = loop.apply_update(session.session_id)
                if log is not None:
                    log(record)
                continue
            doc = loop.docs_by_id[item.candidate_set.doc_id]
            selection = simulate_expert(doc, item.candidate_set, loop.reward_config)
            loop.submit_selection(
                session.session_id, item.candidate_set.item_id, selection.choice,
                rater_id="simulated",
            )
    return loop.metrics()
