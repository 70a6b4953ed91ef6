"""Instruction-task evaluation: exact match, macro aggregation, zero-shot rates."""

from __future__ import annotations

import json
import logging
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

log = logging.getLogger(__name__)

DIMENSIONS = ("CON", "SEM", "PAR", "DEG", "SPK")
SPLITS = ("seen", "unseen")
DEFAULT_ANSWER_SET = ("yes", "no")
DEFAULT_SCALES = (1.0, 0.75, 0.5, 0.25, 0.0)

_TRAILING = string.punctuation + "。！？"


class TaskError(ValueError):
    pass


@dataclass
class TaskSample:
    instruction: str
    audio_id: str
    label: str
    options: list[str] | None = None


@dataclass
class TaskInstance:
    instance_id: str
    dimension: str
    split: str
    samples: list[TaskSample]

    def __post_init__(self) -> None:
        if self.dimension not in DIMENSIONS:
            raise TaskError(f"{self.instance_id}: dimension {self.dimension!r} not in {DIMENSIONS}")
        if self.split not in SPLITS:
            raise TaskError(f"{self.instance_id}: split {self.split!r} not in {SPLITS}")
        self.samples = [s if isinstance(s, TaskSample) else TaskSample(**s) for s in self.samples]
        for s in self.samples:
            if not s.label:
                raise TaskError(f"{self.instance_id}: empty label for audio {s.audio_id}")


def read_tasks(path: str | Path) -> list[TaskInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TaskInstance(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise TaskError(f"{path}:{lineno}: {exc}") from None
    return out


def write_tasks(path: str | Path, tasks: Iterable[TaskInstance]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tasks:
            fh.write(json.dumps(asdict(t), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# matching


def normalize_answer(text: str) -> str:
    """Case-fold, trim, strip terminal punctuation."""
    return text.casefold().strip().rstrip(_TRAILING).strip()


def exact_match(prediction: str, label: str, options: Sequence[str] | None = None) -> bool:
    return normalize_answer(prediction) == normalize_answer(label)


def follows_instruction(response: str, options: Sequence[str] | None = None) -> bool:
    """True if the normalised response is one of the allowed answers."""
    allowed = options if options else DEFAULT_ANSWER_SET
    return normalize_answer(response) in {normalize_answer(o) for o in allowed}


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class InstanceResult:
    instance_id: str
    dimension: str
    split: str
    accuracy: float  # percent
    num_samples: int = 0


@dataclass
class EvalReport:
    per_instance_accuracy: dict[str, float]
    per_dimension: dict[str, dict[str, float]]
    split_average: dict[str, float]
    overall_average: float | None
    counts: dict[str, dict[str, int]]
    notices: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs)


def aggregate(results: Iterable[InstanceResult]) -> EvalReport:
    """Macro averages: every instance counts once within its group.

    The overall average is the mean over all instances, i.e. weighted by
    instance count across splits. Groups without instances are omitted and
    listed in ``notices``.
    """
    results = sorted(results, key=lambda r: r.instance_id)
    per_instance = {r.instance_id: r.accuracy for r in results}
    if len(per_instance) != len(results):
        raise TaskError("duplicate instance ids in results")
    per_dim: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    split_avg: dict[str, float] = {}
    notices = []
    for split in SPLITS:
        in_split = [r for r in results if r.split == split]
        per_dim[split], counts[split] = {}, {}
        for dim in DIMENSIONS:
            group = [r.accuracy for r in in_split if r.dimension == dim]
            if not group:
                notices.append(f"no instances for {split}/{dim}; group omitted")
                continue
            per_dim[split][dim] = _mean(group)
            counts[split][dim] = len(group)
        if in_split:
            split_avg[split] = _mean([r.accuracy for r in in_split])
            counts[split]["Avg"] = len(in_split)
        else:
            notices.append(f"no instances for split {split}; omitted")
    overall = _mean([r.accuracy for r in results]) if results else None
    for n in notices:
        log.info(n)
    return EvalReport(per_instance, per_dim, split_avg, overall, counts, notices)


def evaluate_tasks(tasks: Sequence[TaskInstance], respond: Callable[[TaskSample], str]) -> list[InstanceResult]:
    out = []
    for task in sorted(tasks, key=lambda t: t.instance_id):
        hits = [exact_match(respond(s), s.label, s.options) for s in task.samples]
        acc = 100.0 * sum(hits) / len(hits) if hits else 0.0
        out.append(InstanceResult(task.instance_id, task.dimension, task.split, acc, len(hits)))
    return out


# ---------------------------------------------------------------------------
# zero-shot instruction following


@dataclass
class ZeroShotReport:
    """Rates in percent. ``accuracy`` is None when nothing followed the format."""

    success_rate: float
    accuracy: float | None
    following_rate: float
    num_responses: int
    num_following: int
    num_correct: int
    per_question: dict[str, dict[str, float | None]] = field(default_factory=dict)

    @property
    def is_na(self) -> bool:
        return self.num_following == 0

    def identity_gap(self) -> float:
        """|success - accuracy * following / 100|; zero by construction."""
        acc = 0.0 if self.accuracy is None else self.accuracy
        return abs(self.success_rate - acc * self.following_rate / 100.0)


def _rates(n: int, follow: int, correct: int) -> tuple[float, float | None, float]:
    following = 100.0 * follow / n
    accuracy = 100.0 * correct / follow if follow else None
    success = (accuracy if accuracy is not None else 0.0) * following / 100.0
    return success, accuracy, following


FollowDetector = Callable[[str, Sequence[str] | None], bool]


def zero_shot_metrics(responses: Sequence[Mapping], follow_detector: FollowDetector = follows_instruction) -> ZeroShotReport:
    """Score ``{"text", "label", "options"?, "question"?}`` responses.

    following_rate = % of responses that follow the answer format;
    accuracy = % correct among those; success_rate = accuracy * following / 100.
    """
    if not responses:
        raise ValueError("zero_shot_metrics needs at least one response")
    tallies: dict[str, list[int]] = {}
    n = follow = correct = 0
    for r in responses:
        options = r.get("options")
        f = bool(follow_detector(r["text"], options))
        c = f and exact_match(r["text"], r["label"])
        n += 1
        follow += f
        correct += c
        t = tallies.setdefault(r.get("question", ""), [0, 0, 0])
        t[0] += 1
        t[1] += f
        t[2] += c
    success, accuracy, following = _rates(n, follow, correct)
    per_q = {}
    for q, (qn, qf, qc) in sorted(tallies.items()):
        s, a, fr = _rates(qn, qf, qc)
        per_q[q] = {"success_rate": s, "accuracy": a, "following_rate": fr}
    return ZeroShotReport(success, accuracy, following, n, follow, correct, per_q)


def lora_scale_sweep(model, tasks: Sequence[TaskInstance], scales: Sequence[float],
                     respond: Callable[[TaskSample], str],
                     follow_detector: FollowDetector = follows_instruction) -> list[tuple[float, ZeroShotReport]]:
    """One zero-shot report per LoRA scale.

    ``model.set_lora_scale`` is applied before answering every sample with
    ``respond``; the previous scale is restored afterwards.
    """
    for s in scales:
        if not 0.0 <= float(s) <= 1.0:
            raise ValueError(f"LoRA scale {s} outside [0, 1]")
    pairs = model.lora_pairs() if hasattr(model, "lora_pairs") else []
    previous = pairs[0].scale if pairs else 1.0
    rows = []
    try:
        for s in scales:
            model.set_lora_scale(float(s))
            responses = [
                {"text": respond(sample), "label": sample.label, "options": sample.options,
                 "question": sample.instruction}
                for task in sorted(tasks, key=lambda t: t.instance_id) for sample in task.samples
            ]
            rows.append((float(s), zero_shot_metrics(responses, follow_detector)))
    finally:
        model.set_lora_scale(previous)
    return rows


# ---------------------------------------------------------------------------
# text tables


def format_eval_table(report: EvalReport, title: str = "model") -> str:
    cols = [(split, dim) for split in SPLITS for dim in DIMENSIONS + ("Avg",)]
    head1 = f"{'':<14}" + "".join(f"{split if dim == 'CON' else '':>8}" for split, dim in cols) + f"{'All':>8}"
    head2 = f"{'Model':<14}" + "".join(f"{dim:>8}" for _, dim in cols) + f"{'Avg':>8}"
    counts = f"{'# Instances':<14}" + "".join(
        f"{report.counts.get(split, {}).get(dim, 0):>8}" for split, dim in cols) + f"{len(report.per_instance_accuracy):>8}"

    def cell(split: str, dim: str) -> str:
        v = report.split_average.get(split) if dim == "Avg" else report.per_dimension.get(split, {}).get(dim)
        return f"{'-':>8}" if v is None else f"{v:>8.2f}"

    row = f"{title:<14}" + "".join(cell(s, d) for s, d in cols)
    row += f"{'-':>8}" if report.overall_average is None else f"{report.overall_average:>8.2f}"
    return "\n".join([head1, head2, counts, row])


def format_sweep_table(rows: Sequence[tuple[float, ZeroShotReport]]) -> str:
    lines = [f"{'alpha':>6}  {'Success Rate':>12}  {'Accuracy':>9}  {'Following Rate':>14}"]
    for s, r in rows:
        if r.is_na:
            lines.append(f"{s:>6.2f}  {'N/A':>12}  {'N/A':>9}  {'N/A':>14}")
        else:
            lines.append(f"{s:>6.2f}  {r.success_rate:>12.2f}  {r.accuracy:>9.2f}  {r.following_rate:>14.2f}")
    return "\n".join(lines)


def sweep_records(rows: Sequence[tuple[float, ZeroShotReport]]) -> list[dict]:
    out = []
    for s, r in rows:
        d = asdict(r)
        d["scale"] = s
        d["na"] = r.is_na
        out.append(d)
    return out
