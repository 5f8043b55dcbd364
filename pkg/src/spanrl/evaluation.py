"""Field-level precision / recall / F1 with support-weighted averages.

A prediction is correct iff it equals the ground-truth answer string after
whitespace collapsing and stripping (no case folding). Empty predictions
count as abstentions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .corpus import Document, FieldSchema
from .model import SpanDistribution, SpanPolicy, greedy_decode


def normalize_text(s: str) -> str:
    return " ".join(s.split())


@dataclass(frozen=True)
class FieldResult:
    field: str
    support: int
    n_predicted: int
    n_correct: int
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class EvalReport:
    fields: tuple[FieldResult, ...]
    precision: float
    recall: float
    f1: float
    n_documents: int

    def to_dict(self) -> dict:
        return {
            "n_documents": self.n_documents,
            "weighted": {"precision": self.precision, "recall": self.recall, "f1": self.f1},
            "fields": [
                {
                    "field": r.field,
                    "support": r.support,
                    "n_predicted": r.n_predicted,
                    "n_correct": r.n_correct,
                    "precision": r.precision,
                    "recall": r.recall,
                    "f1": r.f1,
                }
                for r in self.fields
            ],
        }


def _prf(n_correct: int, n_predicted: int, support: int) -> tuple[float, float, float]:
    precision = n_correct / n_predicted if n_predicted else 0.0
    recall = n_correct / support if support else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def extract_all(model: SpanPolicy, doc: Document, schema: FieldSchema) -> dict[str, str]:
    """Greedy answer string for every schema field of one document."""
    fields = list(schema.fields)
    with torch.no_grad():
        hidden, mask = model.encode_batch([doc])
        p = len(fields)
        start_probs, end_probs = model.interact_batch(
            hidden.expand(p, -1, -1), mask.expand(p, -1), model.embed_questions(fields)
        )
        out = {}
        for i, fname in enumerate(fields):
            action = greedy_decode(SpanDistribution(start_probs[i], end_probs[i]))
            out[fname] = doc.text_slice(action.start, action.end)
    return out


def evaluate_predictions(
    predictions: dict[str, dict[str, str]],
    docs: list[Document],
    schema: FieldSchema,
) -> EvalReport:
    """Score per-document field predictions against annotations.

    ``predictions`` maps document id -> field -> predicted string. Weighted
    averages use field support (annotation counts) as weights.
    """
    results = []
    for fname in schema.fields:
        support = 0
        n_predicted = 0
        n_correct = 0
        for doc in docs:
            pred = normalize_text(predictions.get(doc.id, {}).get(fname, ""))
            ann = doc.annotations.get(fname)
            if ann is not None:
                support += 1
            if pred:
                n_predicted += 1
                if ann is not None and pred == normalize_text(ann.text):
                    n_correct += 1
        precision, recall, f1 = _prf(n_correct, n_predicted, support)
        results.append(
            FieldResult(fname, support, n_predicted, n_correct, precision, recall, f1)
        )

    total_support = sum(r.support for r in results)
    if total_support:
        weighted = [
            sum(r.support * getattr(r, m) for r in results) / total_support
            for m in ("precision", "recall", "f1")
        ]
    else:
        weighted = [0.0, 0.0, 0.0]
    return EvalReport(
        fields=tuple(results),
        precision=weighted[0],
        recall=weighted[1],
        f1=weighted[2],
        n_documents=len(docs),
    )


def evaluate(
    model: SpanPolicy, docs: list[Document], schema: FieldSchema, chunk_size: int = 16
) -> EvalReport:
    """Greedy extraction over a split, scored field-by-field."""
    if not docs:
        raise ValueError("cannot evaluate an empty split")
    fields = list(schema.fields)
    predictions: dict[str, dict[str, str]] = {}
    with torch.no_grad():
        for lo in range(0, len(docs), chunk_size):
            chunk = docs[lo : lo + chunk_size]
            hidden, mask = model.encode_batch(chunk)
            n_fields = len(fields)
            start_probs, end_probs = model.interact_batch(
                hidden.repeat_interleave(n_fields, dim=0),
                mask.repeat_interleave(n_fields, dim=0),
                model.embed_questions(fields * len(chunk)),
            )
            i = 0
            for doc in chunk:
                row = {}
                for fname in fields:
                    action = greedy_decode(
                        SpanDistribution(start_probs[i], end_probs[i])
                    )
                    row[fname] = doc.text_slice(action.start, action.end)
                    i += 1
                predictions[doc.id] = row
    return evaluate_predictions(predictions, docs, schema)


def render_report(report: EvalReport, baseline: EvalReport | None = None) -> str:
    """Aligned text table: per-field rows plus the weighted average row."""
    header = f"{'field':<16} {'support':>7} {'precision':>9} {'recall':>9} {'f1':>9}"
    delta_by_field = {}
    if baseline is not None:
        header += f" {'dF1':>9}"
        delta_by_field = {r.field: r.f1 for r in baseline.fields}
    lines = [header, "-" * len(header)]
    for r in report.fields:
        row = (
            f"{r.field:<16} {r.support:>7d} {100 * r.precision:>9.2f} "
            f"{100 * r.recall:>9.2f} {100 * r.f1:>9.2f}"
        )
        if baseline is not None:
            row += f" {100 * (r.f1 - delta_by_field.get(r.field, 0.0)):>+9.2f}"
        lines.append(row)
    total = (
        f"{'weighted':<16} {sum(r.support for r in report.fields):>7d} "
        f"{100 * report.precision:>9.2f} {100 * report.recall:>9.2f} {100 * report.f1:>9.2f}"
    )
    if baseline is not None:
        total += f" {100 * (report.f1 - baseline.f1):>+9.2f}"
    lines.append("-" * len(header))
    lines.append(total)
    return "\n".join(lines)
