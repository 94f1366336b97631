"""Greedy label generation, accuracy reports and loss-curve export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EOS_ID, RawRecord, TaskSpec, detokenize, encode_prompt, parse_label, tokenize
from .model import Model, forward
from .tensor import no_grad

_CORNER = "true/pred"


def generate_label(
    model: Model, task: TaskSpec, text: str, max_new_tokens: int = 16, no_think: bool = True
) -> str:
    """Greedy decoding from the end of the user turn until EOS or ``max_new_tokens``."""
    ids = encode_prompt(text, task, no_think)
    out: list[int] = []
    with no_grad():
        for _ in range(max_new_tokens):
            if len(ids) >= model.config.max_context:
                break
            logits = forward(model, ids, mode="eval").data
            nxt = int(np.argmax(logits[-1]))
            if nxt == EOS_ID:
                break
            out.append(nxt)
            ids.append(nxt)
    return detokenize(out, errors="replace")


def constrained_label(model: Model, task: TaskSpec, text: str, no_think: bool = True) -> str:
    """Pick the label whose full byte sequence (plus EOS) is most likely."""
    prompt = encode_prompt(text, task, no_think)
    best, best_score = task.labels[0], -np.inf
    with no_grad():
        for label in task.labels:
            cont = tokenize(label) + [EOS_ID]
            seq = prompt + cont
            logits = forward(model, seq[:-1], mode="eval").data[len(prompt) - 1:]
            z = logits - logits.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            score = float(logp[np.arange(len(cont)), cont].sum())
            if score > best_score:
                best, best_score = label, score
    return best


@dataclass
class EvalReport:
    labels: tuple[str, ...]
    confusion: np.ndarray  # rows: true label; columns: predicted label, then a no-match column
    total: int

    @property
    def correct(self) -> int:
        return int(np.trace(self.confusion[:, : len(self.labels)]))

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def no_match(self) -> int:
        return int(self.confusion[:, -1].sum())

    @property
    def precision(self) -> dict[str, float]:
        cols = self.confusion[:, : len(self.labels)].sum(axis=0)
        diag = np.diag(self.confusion[:, : len(self.labels)])
        return {l: float(diag[i] / cols[i]) if cols[i] else 0.0 for i, l in enumerate(self.labels)}

    @property
    def recall(self) -> dict[str, float]:
        rows = self.confusion.sum(axis=1)
        diag = np.diag(self.confusion[:, : len(self.labels)])
        return {l: float(diag[i] / rows[i]) if rows[i] else 0.0 for i, l in enumerate(self.labels)}

    @property
    def macro_f1(self) -> float:
        p, r = self.precision, self.recall
        f1 = [2 * p[l] * r[l] / (p[l] + r[l]) if p[l] + r[l] else 0.0 for l in self.labels]
        return float(np.mean(f1))

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "total": self.total,
            "correct": self.correct,
            "no_match": self.no_match,
            "macro_f1": self.macro_f1,
            "precision": self.precision,
            "recall": self.recall,
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
        }

    def to_text(self) -> str:
        width = max(len(l) for l in (*self.labels, "no-match", _CORNER)) + 2
        lines = [
            f"accuracy  {self.accuracy:.4f}  ({self.correct}/{self.total})",
            f"macro_f1  {self.macro_f1:.4f}",
            f"no_match  {self.no_match}",
            "",
            f"{'label':<{width}}{'precision':>10}{'recall':>10}",
        ]
        p, r = self.precision, self.recall
        for l in self.labels:
            lines.append(f"{l:<{width}}{p[l]:>10.4f}{r[l]:>10.4f}")
        lines.append("")
        lines.append(f"{_CORNER:<{width}}" + "".join(f"{c:>{width}}" for c in (*self.labels, "no-match")))
        for i, l in enumerate(self.labels):
            lines.append(f"{l:<{width}}" + "".join(f"{int(v):>{width}}" for v in self.confusion[i]))
        return "\n".join(lines)


def evaluate(
    model: Model,
    records: Sequence[RawRecord],
    task: TaskSpec,
    constrained: bool = False,
    max_new_tokens: int | None = None,
    no_think: bool = True,
) -> EvalReport:
    """Generate, parse and score every record; unparseable outputs count as wrong."""
    n = len(task.labels)
    if max_new_tokens is None:
        max_new_tokens = max(len(tokenize(l)) for l in task.labels) + 2
    confusion = np.zeros((n, n + 1), dtype=np.int64)
    for r in records:
        if constrained:
            generated = constrained_label(model, task, r.text, no_think)
        else:
            generated = generate_label(model, task, r.text, max_new_tokens, no_think)
        pred = parse_label(generated, task)
        confusion[task.index(r.label), n if pred is None else pred] += 1
    return EvalReport(task.labels, confusion, len(records))


def export_loss_curve(report, path) -> None:
    """Write ``step,loss`` rows (1-based steps) after an epoch-boundary comment."""
    if not report.step_losses:
        raise ValueError("report has no steps to export")
    with Path(path).open("w", newline="") as fh:
        fh.write("# epoch boundaries: " + ",".join(str(b) for b in report.epoch_boundaries) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(report.step_losses, 1):
            writer.writerow([i, repr(float(loss))])


def read_loss_curve(path) -> tuple[list[float], list[int]]:
    losses, boundaries = [], []
    with Path(path).open(newline="") as fh:
        for line in fh:
            if line.startswith("# epoch boundaries:"):
                rest = line.split(":", 1)[1].strip()
                boundaries = [int(x) for x in rest.split(",") if x]
            elif line.startswith("#") or line.startswith("step,"):
                continue
            elif line.strip():
                _, loss = line.strip().split(",")
                losses.append(float(loss))
    return losses, boundaries


def epoch_means_from_curve(losses: Sequence[float], boundaries: Sequence[int]) -> list[float]:
    means, start = [], 0
    for b in boundaries:
        means.append(float(np.mean(losses[start:b])))
        start = b
    return means
