"""Clipped-surrogate policy-gradient finetuning of the span policy.

Rollouts sweep each sampled document's questions in schema order; every
question is one environment step. Advantages come from generalized
advantage estimation over a learned value baseline; updates minimize
the negative clipped surrogate plus a squared-error value loss.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Corpus, Document
from .evaluation import evaluate
from .model import (
    DTYPE,
    SpanAction,
    SpanDistribution,
    SpanPolicy,
    clone_policy,
    sample_action,
)
from .rewards import RewardBreakdown, RewardWeights, StandInEncoder, unified_reward
from .sl import TrainingDiverged


@dataclass(frozen=True)
class RewardConfig:
    weights: RewardWeights = field(default_factory=RewardWeights)
    encoder: StandInEncoder = field(default_factory=StandInEncoder)


@dataclass(frozen=True)
class PPOConfig:
    learning_rate: float = 1e-6
    gamma: float = 0.95
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    docs_per_batch: int = 8
    optim_epochs_per_batch: int = 4
    value_loss_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    n_max: int = 100_000  # budget in question-steps
    eval_every: int = 20  # update rounds between dev evaluations
    # Initial rounds that fit only the value head (trunk frozen) so the
    # baseline absorbs per-question return offsets before policy updates.
    value_warmup_rounds: int = 5
    value_warmup_lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not (0.0 < self.clip_epsilon < 1.0):
            raise ValueError(f"clip_epsilon must be in (0, 1), got {self.clip_epsilon}")
        if not (0.0 <= self.gae_lambda <= 1.0):
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")


@dataclass
class Transition:
    doc_id: str
    question: str
    action: SpanAction
    reward: float
    log_prob_old: float
    value_old: float
    timestep: int
    breakdown: RewardBreakdown | None = None

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError(f"non-finite reward {self.reward}")
        if self.log_prob_old > 0.0:
            raise ValueError(f"log_prob_old must be <= 0, got {self.log_prob_old}")


@dataclass
class Trajectory:
    doc_id: str
    transitions: list[Transition]

    def __len__(self) -> int:
        return len(self.transitions)


@dataclass
class AdvantageEstimate:
    advantages: np.ndarray
    returns: np.ndarray


def collect_trajectories(
    corpus: Corpus,
    model: SpanPolicy,
    ppo_config: PPOConfig,
    reward_config: RewardConfig,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """One trajectory per sampled document: sample action + reward per question."""
    n = len(corpus.train)
    if n == 0:
        raise ValueError("corpus has an empty train split")
    # With replacement: a batch may revisit documents, which also lets the
    # batch size exceed a small train split.
    picked = rng.integers(0, n, size=ppo_config.docs_per_batch)
    trajectories = []
    with torch.no_grad():
        for i in picked:
            doc = corpus.train[int(i)]
            fields = [f for f in corpus.schema.fields if f in doc.annotations]
            if not fields:
                trajectories.append(Trajectory(doc_id=doc.id, transitions=[]))
                continue
            hidden, mask = model.encode_batch([doc])
            p = len(fields)
            e_q = model.embed_questions(fields)
            start_probs, end_probs = model.interact_batch(
                hidden.expand(p, -1, -1), mask.expand(p, -1), e_q
            )
            values = model.value_batch(hidden.expand(p, -1, -1), mask.expand(p, -1), e_q)
            transitions = []
            for t, fname in enumerate(fields):
                dist = SpanDistribution(start_probs[t], end_probs[t])
                action, log_prob = sample_action(dist, rng)
                ann = doc.annotations[fname]
                breakdown = unified_reward(
                    doc,
                    action,
                    SpanAction(ann.start, ann.end),
                    fname,
                    reward_config.weights,
                    reward_config.encoder,
                )
                transitions.append(
                    Transition(
                        doc_id=doc.id,
                        question=fname,
                        action=action,
                        reward=breakdown.total,
                        log_prob_old=min(log_prob, 0.0),
                        value_old=float(values[t]),
                        timestep=t,
                        breakdown=breakdown,
                    )
                )
            trajectories.append(Trajectory(doc_id=doc.id, transitions=transitions))
    return trajectories


def compute_advantages(
    trajectories: list[Trajectory],
    gamma: float,
    gae_lambda: float,
    normalize: bool = False,
) -> AdvantageEstimate:
    """GAE advantages and return targets, flattened in trajectory order.

    The terminal state value is 0; return target is advantage + value.
    Normalization (when requested and the batch is non-degenerate) rescales
    advantages to mean 0 and unit standard deviation.
    """
    adv_all: list[float] = []
    ret_all: list[float] = []
    for traj in trajectories:
        horizon = len(traj.transitions)
        values = [tr.value_old for tr in traj.transitions] + [0.0]
        running = 0.0
        adv = [0.0] * horizon
        for t in reversed(range(horizon)):
            delta = traj.transitions[t].reward + gamma * values[t + 1] - values[t]
            running = delta + gamma * gae_lambda * running
            adv[t] = running
        adv_all.extend(adv)
        ret_all.extend(a + v for a, v in zip(adv, values[:horizon]))

    advantages = np.asarray(adv_all, dtype=np.float64)
    returns = np.asarray(ret_all, dtype=np.float64)
    if normalize and advantages.size > 1:
        std = advantages.std()
        if std > 1e-8:
            advantages = (advantages - advantages.mean()) / std
    return AdvantageEstimate(advantages=advantages, returns=returns)


@dataclass
class SurrogateTerms:
    surrogate: torch.Tensor  # differentiable J
    value_loss: torch.Tensor
    entropy: torch.Tensor
    ratios: np.ndarray
    clip_fraction: float


def surrogate_terms(
    model: SpanPolicy,
    docs_by_id: dict[str, Document],
    transitions: list[Transition],
    estimate: AdvantageEstimate,
    clip_epsilon: float,
) -> SurrogateTerms:
    """Recompute current log-probs and assemble the clipped objective."""
    docs: list[Document] = []
    index: dict[str, int] = {}
    for tr in transitions:
        if tr.doc_id not in index:
            index[tr.doc_id] = len(docs)
            docs.append(docs_by_id[tr.doc_id])
    hidden, mask = model.encode_batch(docs)
    rows = torch.tensor([index[tr.doc_id] for tr in transitions])
    h = hidden[rows]
    m = mask[rows]
    e_q = model.embed_questions([tr.question for tr in transitions])
    start_probs, end_probs = model.interact_batch(h, m, e_q)

    starts = torch.tensor([tr.action.start for tr in transitions])
    ends = torch.tensor([tr.action.end for tr in transitions])
    ar = torch.arange(len(transitions))
    tiny = torch.tensor(1e-300, dtype=start_probs.dtype)
    p_start = torch.maximum(start_probs[ar, starts], tiny)
    p_end = torch.maximum(end_probs[ar, ends], tiny)
    # Tail mass of the end distribution at positions >= start (reverse cumsum).
    rev = torch.flip(torch.cumsum(torch.flip(end_probs, [1]), 1), [1])
    tail = torch.maximum(rev[ar, starts], tiny)
    log_prob = torch.log(p_start) + torch.log(p_end) - torch.log(tail)

    old = torch.tensor([tr.log_prob_old for tr in transitions], dtype=DTYPE)
    adv = torch.from_numpy(estimate.advantages)
    ret = torch.from_numpy(estimate.returns)
    ratio = torch.exp(log_prob - old)
    clipped = torch.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)
    surrogate = torch.minimum(ratio * adv, clipped * adv).mean()
    values = model.value_batch(h, m, e_q)
    value_loss = ((values - ret) ** 2).mean()
    entropy = -0.5 * (
        (start_probs * torch.log(torch.maximum(start_probs, tiny))).sum(-1)
        + (end_probs * torch.log(torch.maximum(end_probs, tiny))).sum(-1)
    ).mean()

    ratios_arr = ratio.detach().numpy()
    return SurrogateTerms(
        surrogate=surrogate,
        value_loss=value_loss,
        entropy=entropy,
        ratios=ratios_arr,
        clip_fraction=float(np.mean(np.abs(ratios_arr - 1.0) > clip_epsilon)),
    )


def ppo_surrogate(
    model: SpanPolicy,
    docs_by_id: dict[str, Document],
    transitions: list[Transition],
    advantages: np.ndarray,
    clip_epsilon: float,
) -> torch.Tensor:
    """The clipped surrogate objective J alone (differentiable scalar)."""
    estimate = AdvantageEstimate(
        advantages=np.asarray(advantages, dtype=np.float64),
        returns=np.zeros(len(transitions)),
    )
    return surrogate_terms(model, docs_by_id, transitions, estimate, clip_epsilon).surrogate


def _mean_breakdown(transitions: list[Transition]) -> dict:
    keys = ("r_string", "r_location", "r_label", "r_semantic", "total")
    sums = dict.fromkeys(keys, 0.0)
    n = 0
    for tr in transitions:
        if tr.breakdown is None:
            continue
        n += 1
        for k in keys:
            sums[k] += getattr(tr.breakdown, k)
    return {k: (sums[k] / n if n else 0.0) for k in keys}


def _breakdown_max_error(transitions: list[Transition], weights: RewardWeights) -> float:
    worst = 0.0
    for tr in transitions:
        b = tr.breakdown
        if b is None:
            continue
        expected = (
            weights.string * b.r_string
            + weights.location * b.r_location
            + weights.label * b.r_label
            + weights.semantic * b.r_semantic
        )
        worst = max(worst, abs(b.total - expected))
    return worst


def finetune(
    model: SpanPolicy,
    corpus: Corpus,
    ppo_config: PPOConfig,
    reward_config: RewardConfig,
    log=None,
) -> tuple[SpanPolicy, list[dict]]:
    """Run update rounds until the question-step budget n_max is spent.

    Returns the dev-best checkpoint when a dev split exists, otherwise the
    final parameters, plus one metrics record per update round.
    """
    if ppo_config.n_max <= 0:
        return model, []
    model = clone_policy(model)
    value_params = list(model.value_hidden.parameters()) + list(model.value_out.parameters())
    value_optimizer = torch.optim.Adam(value_params, lr=ppo_config.value_warmup_lr)
    optimizer = torch.optim.Adam(model.parameters(), lr=ppo_config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(ppo_config.seed))
    docs_by_id = {d.id: d for d in corpus.train}
    use_dev = bool(corpus.dev)

    history: list[dict] = []
    best_state = None
    best_f1 = -np.inf
    steps_total = 0
    round_idx = 0

    while steps_total < ppo_config.n_max:
        t0 = time.perf_counter()
        warming_up = round_idx < ppo_config.value_warmup_rounds
        # Collecting under the current parameters makes them the "old" policy
        # for this round; cached log-probs play the snapshot role.
        trajectories = collect_trajectories(corpus, model, ppo_config, reward_config, rng)
        transitions = [tr for traj in trajectories for tr in traj.transitions]
        if not transitions:
            raise ValueError("sampled documents contain no annotated fields")
        steps_total += len(transitions)
        estimate = compute_advantages(
            trajectories,
            ppo_config.gamma,
            ppo_config.gae_lambda,
            normalize=ppo_config.normalize_advantages and not warming_up,
        )

        terms = None
        for _ in range(ppo_config.optim_epochs_per_batch):
            terms = surrogate_terms(
                model, docs_by_id, transitions, estimate, ppo_config.clip_epsilon
            )
            if warming_up:
                loss = terms.value_loss
            else:
                loss = (
                    -terms.surrogate
                    + ppo_config.value_loss_coef * terms.value_loss
                    - ppo_config.entropy_coef * terms.entropy
                )
            if not torch.isfinite(loss):
                rewards = [tr.reward for tr in transitions]
                raise TrainingDiverged(
                    f"non-finite loss at round {round_idx}; "
                    f"docs={sorted({tr.doc_id for tr in transitions})}, "
                    f"rewards={rewards}, advantages={estimate.advantages.tolist()}"
                )
            model.zero_grad()
            loss.backward()
            (value_optimizer if warming_up else optimizer).step()

        round_idx += 1
        record = {
            "round": round_idx,
            "steps_total": steps_total,
            "reward_mean": float(np.mean([tr.reward for tr in transitions])),
            "reward_components": _mean_breakdown(transitions),
            "breakdown_max_error": _breakdown_max_error(transitions, reward_config.weights),
            "surrogate": float(terms.surrogate.detach()),
            "clip_fraction": terms.clip_fraction,
            "value_loss": float(terms.value_loss.detach()),
            "entropy": float(terms.entropy.detach()),
            "warmup": warming_up,
            "dev_f1": None,
            "wall_time_s": time.perf_counter() - t0,
        }
        if use_dev and round_idx % ppo_config.eval_every == 0:
            dev_f1 = evaluate(model, corpus.dev, corpus.schema).f1
            record["dev_f1"] = dev_f1
            if dev_f1 > best_f1:
                best_f1 = dev_f1
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
        history.append(record)
        if log is not None:
            log(record)

    if best_state is not None:
        model.load_state_dict(best_state)
    return model, history
