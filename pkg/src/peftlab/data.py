"""Task definitions, dataset ingestion, byte tokenizer and the two-turn instruction template."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NO_THINK = "\\no_think"

# byte ids occupy 0..255; specials follow
SEP_ID = 256  # end of user turn / start of assistant turn
EOS_ID = 257  # end of assistant turn
PAD_ID = 258
VOCAB_SIZE = 259

SENTIMENT_INSTRUCTION = "Do sentiment classification for financial text."
TOPIC_INSTRUCTION = "Do topic classification for financial text."


class DatasetError(ValueError):
    """A dataset line is malformed or carries a label outside the task."""


class EncodingError(ValueError):
    pass


class TruncationError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    labels: tuple[str, ...]
    instruction: str

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.labels) < 2:
            raise ValueError(f"task {self.name!r} needs at least 2 labels")
        folded = [normalize_label(l) for l in self.labels]
        if len(set(folded)) != len(folded):
            raise ValueError(f"task {self.name!r} labels are not unique after case-folding")

    def index(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class RawRecord:
    text: str
    label: str


@dataclass(frozen=True)
class InstructionExample:
    ids: tuple[int, ...]
    mask: tuple[bool, ...]
    label_index: int

    @property
    def prompt_length(self) -> int:
        """Number of tokens up to and including the turn separator."""
        return self.ids.index(SEP_ID) + 1


def sentiment3() -> TaskSpec:
    return TaskSpec("sentiment", ("Neutral", "Positive", "Negative"), SENTIMENT_INSTRUCTION)


def topic20(labels: Sequence[str]) -> TaskSpec:
    """The 20-way news-topic task; category names come from the user's copy of the data."""
    if len(labels) != 20:
        raise ValueError(f"topic20 needs exactly 20 labels, got {len(labels)}")
    return TaskSpec("topic", tuple(labels), TOPIC_INSTRUCTION)


# ---------------------------------------------------------------------------
# Flat config files
# ---------------------------------------------------------------------------
def parse_flat_config(text: str) -> dict[str, dict]:
    """Parse ``key = value`` lines grouped under optional ``[section]`` headers.

    Values are read as JSON when possible (numbers, booleans, quoted strings,
    lists) and otherwise kept as bare strings. Top-level keys live under "".
    """
    sections: dict[str, dict] = {"": {}}
    current = sections[""]
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1].strip(), {})
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            current[key] = json.loads(value)
        except json.JSONDecodeError:
            current[key] = value
    return sections


def load_task(spec: str, labels: Sequence[str] | None = None) -> TaskSpec:
    """Resolve a preset name (``sentiment3``, ``topic20``) or a task file path."""
    if spec == "sentiment3":
        return sentiment3()
    if spec == "topic20":
        if labels is None:
            raise ValueError("topic20 has no built-in label names; supply them in a task file")
        return topic20(labels)
    path = Path(spec)
    if not path.is_file():
        raise ValueError(f"unknown task preset or file: {spec}")
    sections = parse_flat_config(path.read_text(encoding="utf-8"))
    section = sections.get("task") or sections[""]
    if "labels" not in section:
        raise ValueError(f"{path}: task section must declare labels = [...]")
    return TaskSpec(
        name=str(section.get("name", path.stem)),
        labels=tuple(section["labels"]),
        instruction=str(section.get("instruction", SENTIMENT_INSTRUCTION)),
    )


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------
def _validated(text, label, task: TaskSpec, where: str) -> RawRecord:
    if not isinstance(text, str) or not text.strip():
        raise DatasetError(f"{where}: empty or non-string text")
    if label not in task.labels:
        raise DatasetError(f"{where}: label {label!r} not in task labels {list(task.labels)}")
    return RawRecord(text=text, label=label)


def histogram(records: Iterable[RawRecord], task: TaskSpec) -> dict[str, int]:
    counts = Counter(r.label for r in records)
    return {label: counts.get(label, 0) for label in task.labels}


def load_dataset(path, task: TaskSpec) -> tuple[list[RawRecord], dict[str, int]]:
    """Read a JSON-lines file of ``{"text": ..., "label": ...}`` objects.

    CSV files (``.csv`` suffix, header row with ``text`` and ``label``
    columns, or any two columns in that order) are accepted too.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        records = _load_csv(path, task)
    else:
        records = []
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
                if not isinstance(obj, dict) or "text" not in obj or "label" not in obj:
                    raise DatasetError(f"{path}:{lineno}: expected an object with 'text' and 'label'")
                records.append(_validated(obj["text"], obj["label"], task, f"{path}:{lineno}"))
    return records, histogram(records, task)


def _load_csv(path: Path, task: TaskSpec) -> list[RawRecord]:
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return []
        cols = [h.strip().lower() for h in header]
        ti = cols.index("text") if "text" in cols else 0
        li = cols.index("label") if "label" in cols else 1
        records = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) <= max(ti, li):
                raise DatasetError(f"{path}:{lineno}: expected at least 2 columns")
            records.append(_validated(row[ti], row[li].strip(), task, f"{path}:{lineno}"))
    return records


def write_jsonl(records: Iterable[RawRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({"text": r.text, "label": r.label}, ensure_ascii=False) + "\n")


def stratified_split(
    records: Sequence[RawRecord], val_fraction: float = 0.1, seed: int = 0
) -> tuple[list[RawRecord], list[RawRecord]]:
    """Deterministic per-label split; original order is kept inside each part."""
    rng = np.random.default_rng(seed)
    by_label: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_label.setdefault(r.label, []).append(i)
    val_idx: set[int] = set()
    for label in sorted(by_label):
        idx = by_label[label]
        n_val = int(round(len(idx) * val_fraction))
        chosen = rng.permutation(len(idx))[:n_val]
        val_idx.update(idx[c] for c in chosen)
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------------
# Template and tokenizer
# ---------------------------------------------------------------------------
def render_example(record: RawRecord, task: TaskSpec, no_think: bool = True) -> tuple[str, str]:
    user = f"{task.instruction} {record.text}"
    if no_think:
        user = f"{NO_THINK} {user}"
    return user, record.label


def render_prompt(text: str, task: TaskSpec, no_think: bool = True) -> str:
    return render_example(RawRecord(text, task.labels[0]), task, no_think)[0]


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(ids: Iterable[int], errors: str = "strict") -> str:
    """Map byte ids back to text; special ids are dropped."""
    raw = bytes(i for i in ids if 0 <= i < 256)
    try:
        return raw.decode("utf-8", errors=errors)
    except UnicodeDecodeError as exc:
        raise EncodingError(f"ids do not form valid UTF-8: {exc.reason} at byte {exc.start}") from exc


def encode_prompt(text: str, task: TaskSpec, no_think: bool = True) -> list[int]:
    return tokenize(render_prompt(text, task, no_think)) + [SEP_ID]


def encode_example(
    record: RawRecord, task: TaskSpec, max_tokens: int = 360, no_think: bool = True
) -> InstructionExample:
    """[user bytes, SEP, label bytes, EOS]; the mask covers the label bytes and EOS."""
    user, assistant = render_example(record, task, no_think)
    u, a = tokenize(user), tokenize(assistant)
    ids = u + [SEP_ID] + a + [EOS_ID]
    if len(ids) > max_tokens:
        preview = record.text[:40]
        raise TruncationError(
            f"record {preview!r} renders to {len(ids)} tokens, over the {max_tokens}-token limit"
        )
    mask = [False] * (len(u) + 1) + [True] * (len(a) + 1)
    return InstructionExample(ids=tuple(ids), mask=tuple(mask), label_index=task.index(record.label))


def normalize_label(s: str) -> str:
    return s.strip().casefold()


def parse_label(generated: str, task: TaskSpec) -> int | None:
    """Index of the label matching ``generated`` after trim + case-fold, else None."""
    key = normalize_label(generated)
    for i, label in enumerate(task.labels):
        if normalize_label(label) == key:
            return i
    return None
