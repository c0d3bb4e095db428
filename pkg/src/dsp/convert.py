"""Mechanical conversions between tree representations.

``decouple`` strips every token that is not inside a leaf slot; ``recouple``
puts them back. Tokens that fall between two slots are re-attached to the
deepest node dominating both neighbours, leading and trailing tokens to the
root. That makes ``recouple(decouple(t), leaves(t)) == t`` for every
compositional tree whose intents only carry loose tokens between their
slots (the root may carry them anywhere).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

from dsp.tree import (
    Form,
    Kind,
    LabelNode,
    SemanticTree,
    TokenNode,
    intent as make_intent,
    slot as make_slot,
    tokenize,
    validate_compositional,
)

logger = logging.getLogger(__name__)


class ConversionError(ValueError):
    pass


class InvalidInput(ConversionError):
    pass


class NotRecoverable(ConversionError):
    pass


class SpanOutOfBounds(ConversionError):
    pass


class OverlappingSpans(ConversionError):
    pass


class DuplicateSlotName(ConversionError):
    pass


@dataclass(frozen=True)
class FlatFrame:
    """Single intent plus non-overlapping slot spans (token offsets, end exclusive)."""

    intent: str
    slots: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "slots", tuple(tuple(s) for s in self.slots))


@dataclass(frozen=True)
class DialogueState:
    intent: str
    constraints: tuple = field(default=())

    def __post_init__(self):
        norm = []
        for name, value in self.constraints:
            if isinstance(value, str):
                value = tokenize(value)
            norm.append((name, tuple(value)))
        object.__setattr__(self, "constraints", tuple(norm))


def _is_leaf_slot(node) -> bool:
    return (
        isinstance(node, LabelNode)
        and node.kind is Kind.SLOT
        and not any(isinstance(c, LabelNode) for c in node.children)
    )


def _strip(node: LabelNode) -> LabelNode:
    if _is_leaf_slot(node):
        return node
    return LabelNode(
        node.label, tuple(_strip(c) for c in node.children if isinstance(c, LabelNode))
    )


def decouple(tree: SemanticTree, check: bool = True) -> SemanticTree:
    """Compositional tree -> decoupled tree (drop tokens outside leaf slots)."""
    if tree.form is not Form.COMPOSITIONAL:
        raise InvalidInput("decouple expects a compositional tree")
    if check:
        report = validate_compositional(tree, _leaf_tokens(tree.root), allow_leaf_intent=True)
        if not report.ok:
            raise InvalidInput("; ".join(map(str, report.violations)))
    return SemanticTree(_strip(tree.root), Form.DECOUPLED)


def _leaf_tokens(node):
    if isinstance(node, TokenNode):
        return [node.token]
    return [t for c in node.children for t in _leaf_tokens(c)]


def _leaf_slots(node, path=()):
    if _is_leaf_slot(node):
        yield path, node
        return
    if isinstance(node, LabelNode):
        if node.kind is Kind.REF:
            raise NotRecoverable("reference nodes have no position in the utterance")
        for i, c in enumerate(node.children):
            yield from _leaf_slots(c, path + (i,))


def _find(seq, sub, start):
    n = len(sub)
    for i in range(start, len(seq) - n + 1):
        if list(seq[i : i + n]) == list(sub):
            return i
    return -1


def recouple(tree: SemanticTree, utterance: Sequence[str]) -> SemanticTree:
    """Decoupled tree + utterance -> compositional tree."""
    utterance = list(utterance)
    slots = list(_leaf_slots(tree.root))
    spans = []
    cursor = 0
    for path, node in slots:
        value = [c.token for c in node.children]
        at = _find(utterance, value, cursor)
        if at < 0:
            where = "absent" if _find(utterance, value, 0) < 0 else "out of order"
            raise NotRecoverable(f"slot {node.name} value {value} is {where} in the utterance")
        if _find(utterance, value, at + 1) >= 0:
            logger.info("slot %s value %s occurs more than once; using first match", node.name, value)
        spans.append((at, at + len(value)))
        cursor = at + len(value)

    # inserts[path][i] -> tokens placed before original child i of the node at path
    inserts: dict[tuple, dict[int, list[str]]] = {}
    covered = set()
    for s, e in spans:
        covered.update(range(s, e))
    for pos, tok in enumerate(utterance):
        if pos in covered:
            continue
        prev = max((k for k, (_, e) in enumerate(spans) if e <= pos), default=None)
        nxt = min((k for k, (s, _) in enumerate(spans) if s > pos), default=None)
        if prev is not None and nxt is not None:
            a, b = slots[prev][0], slots[nxt][0]
            depth = 0
            while depth < min(len(a), len(b)) and a[depth] == b[depth]:
                depth += 1
            host, index = a[:depth], a[depth] + 1
        elif prev is not None:
            host, index = (), slots[prev][0][0] + 1
        elif nxt is not None:
            host, index = (), slots[nxt][0][0]
        else:
            host, index = (), len(tree.root.children)
        inserts.setdefault(host, {}).setdefault(index, []).append(tok)

    def rebuild(node, path):
        if not isinstance(node, LabelNode) or _is_leaf_slot(node):
            return node
        extra = inserts.get(path, {})
        children = []
        for i, c in enumerate(node.children):
            children.extend(TokenNode(t) for t in extra.get(i, ()))
            children.append(rebuild(c, path + (i,)))
        children.extend(TokenNode(t) for t in extra.get(len(node.children), ()))
        return LabelNode(node.label, tuple(children))

    return SemanticTree(rebuild(tree.root, ()), Form.COMPOSITIONAL)


def flat_to_decoupled(frame: FlatFrame, utterance: Sequence[str]) -> SemanticTree:
    spans = sorted(frame.slots, key=lambda s: (s[1], s[2]))
    last_end = 0
    children = []
    for name, start, end in spans:
        if not 0 <= start < end <= len(utterance):
            raise SpanOutOfBounds(f"slot {name} span [{start}, {end}) outside utterance of {len(utterance)}")
        if start < last_end:
            raise OverlappingSpans(f"slot {name} span [{start}, {end}) overlaps previous slot")
        last_end = end
        children.append(make_slot(name, *utterance[start:end]))
    return SemanticTree(make_intent(frame.intent, *children), Form.DECOUPLED)


def state_to_tree(state: DialogueState) -> SemanticTree:
    names = [name for name, _ in state.constraints]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DuplicateSlotName(f"duplicate slot names in state: {dupes}")
    children = [make_slot(name, *value) for name, value in sorted(state.constraints)]
    return SemanticTree(make_intent(state.intent, *children), Form.DECOUPLED)


def parse_flat_line(line: str) -> tuple[FlatFrame, list[str]]:
    """``intent TAB utterance TAB slot:start:end[,slot:start:end...]``."""
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (2, 3):
        raise ValueError(f"expected 2 or 3 tab-separated fields, got {len(parts)}")
    utterance = tokenize(parts[1])
    slots = []
    if len(parts) == 3 and parts[2].strip():
        for item in parts[2].split(","):
            name, start, end = item.strip().rsplit(":", 2)
            slots.append((name, int(start), int(end)))
    return FlatFrame(parts[0].strip(), tuple(slots)), utterance
