"""Supervised pretraining: cross-entropy on answer start/end positions."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .corpus import Corpus, Document
from .evaluation import evaluate
from .model import ModelConfig, SpanAction, SpanDistribution, SpanPolicy, clone_policy

PROB_FLOOR = 1e-12

# Relative train-loss improvement below this counts as a plateau epoch when
# there is no dev split to early-stop on.
LOSS_PLATEAU_REL = 1e-4


class TrainingDiverged(Exception):
    """Loss became non-finite."""


@dataclass(frozen=True)
class SLConfig:
    learning_rate: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")


def ce_loss(dist: SpanDistribution, a_gt: SpanAction) -> torch.Tensor:
    """Sum of start and end position cross-entropies for one example."""
    n = len(dist)
    if not (0 <= a_gt.start <= a_gt.end < n):
        raise ValueError(f"ground truth span {a_gt} invalid for length {n}")
    floor = torch.tensor(PROB_FLOOR, dtype=dist.start_probs.dtype)
    return -(
        torch.log(torch.maximum(dist.start_probs[a_gt.start], floor))
        + torch.log(torch.maximum(dist.end_probs[a_gt.end], floor))
    )


def batch_ce_loss(model: SpanPolicy, batch: list[tuple[Document, str]]) -> torch.Tensor:
    """Mean CE over (document, question) pairs; documents encoded as one padded batch."""
    docs: list[Document] = []
    index: dict[str, int] = {}
    for doc, _ in batch:
        if doc.id not in index:
            index[doc.id] = len(docs)
            docs.append(doc)
    hidden, mask = model.encode_batch(docs)
    rows = torch.tensor([index[doc.id] for doc, _ in batch])
    e_q = model.embed_questions([fname for _, fname in batch])
    start_probs, end_probs = model.interact_batch(hidden[rows], mask[rows], e_q)
    starts = torch.tensor([doc.annotations[f].start for doc, f in batch])
    ends = torch.tensor([doc.annotations[f].end for doc, f in batch])
    ar = torch.arange(len(batch))
    floor = torch.tensor(PROB_FLOOR, dtype=start_probs.dtype)
    losses = -(
        torch.log(torch.maximum(start_probs[ar, starts], floor))
        + torch.log(torch.maximum(end_probs[ar, ends], floor))
    )
    return losses.mean()


def train_supervised(
    corpus: Corpus,
    model_config: ModelConfig,
    sl_config: SLConfig,
    log=None,
) -> tuple[SpanPolicy, list[dict]]:
    """Train until dev F1 (or train loss, when dev is empty) stops improving.

    Returns the best-scoring parameters and one metrics record per epoch.
    """
    if not corpus.train:
        raise ValueError("corpus has an empty train split")
    model = SpanPolicy(model_config)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=sl_config.learning_rate,
        betas=(sl_config.adam_beta1, sl_config.adam_beta2),
        eps=sl_config.adam_eps,
    )
    rng = np.random.Generator(np.random.PCG64(sl_config.seed))
    # Spans the encoder truncates away cannot be supervised.
    pairs = [
        (doc, fname)
        for doc in corpus.train
        for fname in corpus.schema.fields
        if fname in doc.annotations
        and doc.annotations[fname].end < model_config.max_seq_len
    ]
    if not pairs:
        raise ValueError("train split has no supervisable (document, question) pairs")
    use_dev = bool(corpus.dev)

    history: list[dict] = []
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best_metric = -np.inf
    prev_loss = np.inf
    stale_epochs = 0

    for epoch in range(sl_config.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(pairs))
        epoch_losses = []
        for lo in range(0, len(order), sl_config.batch_size):
            batch = [pairs[i] for i in order[lo : lo + sl_config.batch_size]]
            loss = batch_ce_loss(model, batch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        train_loss = float(np.mean(epoch_losses))

        dev_f1 = None
        if use_dev:
            dev_f1 = evaluate(model, corpus.dev, corpus.schema).f1
            metric = dev_f1
            improved = metric > best_metric
        else:
            metric = -train_loss
            improved = metric > best_metric and (
                prev_loss - train_loss > LOSS_PLATEAU_REL * max(abs(prev_loss), 1e-12)
            )
        if epoch == 0:
            improved = True

        if improved:
            best_metric = metric
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            stale_epochs = 0
        else:
            stale_epochs += 1

        record = {
            "epoch": epoch,
            "train_loss": train_loss,
            "dev_f1": dev_f1,
            "wall_time_s": time.perf_counter() - t0,
        }
        history.append(record)
        if log is not None:
            log(record)
        prev_loss = train_loss
        if stale_epochs >= sl_config.patience:
            break

    best = clone_policy(model)
    best.load_state_dict(best_state)
    return best, history
