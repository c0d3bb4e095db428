"""Exact-match evaluation: frame accuracy and friends, Oracle@Beam, carryover.

Predictions may be trees, bracketed strings or token lists. Anything that
does not parse or validate is scored as wrong by every tree metric.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any, Optional, Sequence

from dsp.linearize import CanonPolicy, LinearizeError, canonical_string, from_linear
from dsp.session import BUCKETS, Session, distance_bucket, extract_carryover
from dsp.tree import SemanticTree, collect_slots, validate


class MetricError(ValueError):
    pass


class LengthMismatch(MetricError):
    pass


class EmptyBeam(MetricError):
    pass


class AlignmentError(MetricError):
    pass


def as_tree(pred: Any) -> Optional[SemanticTree]:
    """Coerce a prediction to a valid tree, or None when it is malformed."""
    if pred is None:
        return None
    if hasattr(pred, "tokens") and not isinstance(pred, SemanticTree):
        pred = pred.tokens
    if not isinstance(pred, SemanticTree):
        try:
            pred = from_linear(pred, allow_leaf_intent=True)
        except (LinearizeError, ValueError):
            return None
    if not validate(pred, allow_leaf_intent=True).ok:
        return None
    return pred


def _check(preds, golds):
    if len(preds) != len(golds):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(golds)} golds")
    if not golds:
        raise LengthMismatch("empty corpus")


def _match(pred, gold: SemanticTree, policy: CanonPolicy) -> bool:
    tree = as_tree(pred)
    return tree is not None and canonical_string(tree, policy) == canonical_string(gold, policy)


def _intent_match(pred, gold: SemanticTree) -> bool:
    tree = as_tree(pred)
    return tree is not None and tree.intent == gold.intent


def frame_accuracy(preds: Sequence, golds: Sequence[SemanticTree], policy: CanonPolicy = CanonPolicy()) -> float:
    _check(preds, golds)
    return sum(_match(p, g, policy) for p, g in zip(preds, golds)) / len(golds)


def ref_only_fa(preds, golds, policy: CanonPolicy = CanonPolicy()) -> float:
    return frame_accuracy(preds, golds, replace(policy, collapse_ref_kinds=True))


def intent_accuracy(preds, golds) -> float:
    _check(preds, golds)
    return sum(_intent_match(p, g) for p, g in zip(preds, golds)) / len(golds)


def inner_parse_accuracy(preds, golds, policy: CanonPolicy = CanonPolicy()) -> float:
    return frame_accuracy(preds, golds, replace(policy, strip_root_intent=True))


def _top_k(beams, golds, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    _check(beams, golds)
    for i, beam in enumerate(beams):
        if len(beam) == 0:
            raise EmptyBeam(f"example {i} has an empty beam")
    return [list(beam)[:k] for beam in beams]


def oracle_at_beam(beams, golds, k: int, policy: CanonPolicy = CanonPolicy()) -> float:
    """Fraction of examples where any of the top-k hypotheses matches gold."""
    tops = _top_k(beams, golds, k)
    return sum(any(_match(h, g, policy) for h in top) for top, g in zip(tops, golds)) / len(golds)


@dataclass
class EvalReport:
    frame_acc: float
    ref_only_fa: float
    intent_acc: float
    inner_parse_acc: float
    n: int
    beam: int = 1

    def to_dict(self):
        return asdict(self)


def evaluate(preds, golds, policy: CanonPolicy = CanonPolicy()) -> EvalReport:
    return EvalReport(
        frame_acc=frame_accuracy(preds, golds, policy),
        ref_only_fa=ref_only_fa(preds, golds, policy),
        intent_acc=intent_accuracy(preds, golds),
        inner_parse_acc=inner_parse_accuracy(preds, golds, policy),
        n=len(golds),
    )


def evaluate_beams(beams, golds, k: int, policy: CanonPolicy = CanonPolicy()) -> EvalReport:
    """Every metric in its Oracle@k variant (one row of the beam table)."""
    tops = _top_k(beams, golds, k)
    n = len(golds)

    def oracle(score):
        return sum(any(score(h, g) for h in top) for top, g in zip(tops, golds)) / n

    return EvalReport(
        frame_acc=oracle(lambda h, g: _match(h, g, policy)),
        ref_only_fa=oracle(lambda h, g: _match(h, g, replace(policy, collapse_ref_kinds=True))),
        intent_acc=oracle(_intent_match),
        inner_parse_acc=oracle(lambda h, g: _match(h, g, replace(policy, strip_root_intent=True))),
        n=n,
        beam=k,
    )


@dataclass
class BucketScore:
    correct: int = 0
    total: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else float("nan")


@dataclass
class CarryoverReport:
    buckets: dict = field(default_factory=lambda: {b: BucketScore() for b in BUCKETS})
    frame_acc_all_turns: float = 0.0
    frame_acc_final_turns: float = 0.0
    n_turns: int = 0
    n_sessions: int = 0
    count_all_turns: bool = False

    @property
    def n_facts(self) -> int:
        return sum(b.total for b in self.buckets.values())

    def to_dict(self):
        return {
            "buckets": {
                k: {"correct": b.correct, "total": b.total, "accuracy": b.accuracy}
                for k, b in self.buckets.items()
            },
            "frame_acc_all_turns": self.frame_acc_all_turns,
            "frame_acc_final_turns": self.frame_acc_final_turns,
            "n_turns": self.n_turns,
            "n_sessions": self.n_sessions,
            "count_all_turns": self.count_all_turns,
        }


def _slot_pairs(tree: Optional[SemanticTree]) -> set:
    if tree is None:
        return set()
    return {(name, tuple(t.lower() for t in value)) for _, name, value in collect_slots(tree)}


def _loose_tree(pred):
    # carryover only inspects slot content, so structurally parseable is enough
    if pred is None or isinstance(pred, SemanticTree):
        return pred
    if hasattr(pred, "tokens"):
        pred = pred.tokens
    try:
        return from_linear(pred, allow_leaf_intent=True)
    except (LinearizeError, ValueError):
        return None


def carryover_report(
    preds: Sequence[Sequence],
    golds: Sequence,
    count_all_turns: bool = False,
    policy: CanonPolicy = CanonPolicy(sort_sibling_slots=True),
) -> CarryoverReport:
    """Slot carryover accuracy by distance bucket.

    ``golds`` holds one entry per session, either a :class:`Session` or a
    list of gold trees (user turns). ``preds[i]`` is aligned with the gold
    user turns of session ``i``.
    """
    if len(preds) != len(golds):
        raise AlignmentError(f"{len(preds)} prediction sessions vs {len(golds)} gold sessions")
    report = CarryoverReport(count_all_turns=count_all_turns)
    all_hits = final_hits = 0
    for s, (session_preds, gold) in enumerate(zip(preds, golds)):
        if isinstance(gold, Session):
            idx = [i for i in gold.user_indices if gold.turns[i].gold is not None]
            trees = [gold.turns[i].gold for i in idx]
            positions = idx if count_all_turns else None
        else:
            trees, positions = list(gold), None
        if len(session_preds) != len(trees):
            raise AlignmentError(
                f"session {s}: {len(session_preds)} predictions vs {len(trees)} gold turns"
            )
        if not trees:
            continue
        facts = extract_carryover(trees, positions)
        order = positions or list(range(len(trees)))
        pairs = {pos: _slot_pairs(_loose_tree(p)) for pos, p in zip(order, session_preds)}
        for fact in facts:
            bucket = report.buckets[distance_bucket(fact.distance)]
            bucket.total += 1
            bucket.correct += (fact.label, tuple(t.lower() for t in fact.value)) in pairs[fact.turn_index]
        hits = [_match(p, g, policy) for p, g in zip(session_preds, trees)]
        all_hits += sum(hits)
        final_hits += hits[-1]
        report.n_turns += len(trees)
        report.n_sessions += 1
    if report.n_turns:
        report.frame_acc_all_turns = all_hits / report.n_turns
        report.frame_acc_final_turns = final_hits / report.n_sessions
    return report


def format_beam_table(rows: Sequence[EvalReport]) -> str:
    header = f"{'Oracle@Beam':>11}  {'FA':>6}  {'Ref-only FA':>11}  {'Intent Acc.':>11}  {'Inner Parse Acc.':>16}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.beam:>11}  {100 * r.frame_acc:6.2f}  {100 * r.ref_only_fa:11.2f}  "
            f"{100 * r.intent_acc:11.2f}  {100 * r.inner_parse_acc:16.2f}"
        )
    return "\n".join(lines)


def format_carryover_table(report: CarryoverReport) -> str:
    cols = "  ".join(f"{b:>7}" for b in BUCKETS)
    header = f"{'Accuracy (all)':>14}  {'Accuracy (final)':>16}  {cols}"
    cells = "  ".join(f"{100 * report.buckets[b].accuracy:7.2f}" for b in BUCKETS)
    counts = "  ".join(f"{report.buckets[b].total:>7}" for b in BUCKETS)
    return "\n".join(
        [
            f"{'':>14}  {'':>16}  {'Slot distance':^{len(cols)}}",
            header,
            "-" * len(header),
            f"{100 * report.frame_acc_all_turns:14.2f}  {100 * report.frame_acc_final_turns:16.2f}  {cells}",
            f"{'facts':>14}  {'':>16}  {counts}",
        ]
    )
