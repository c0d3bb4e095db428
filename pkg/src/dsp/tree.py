"""Intent/slot/ref trees and their structural validators.

A tree is built from two immutable node types: :class:`LabelNode` (an
intent, slot or reference with ordered children) and :class:`TokenNode`
(an utterance token). Trees come in two forms. Compositional trees keep
every utterance token so that reading the leaves in order gives back the
utterance; decoupled trees keep only the tokens that sit inside slots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Sequence, Union

SEPARATOR = ";"
ROOT_PLACEHOLDER = "__ROOT__"

_ESCAPES = {";": "<semi>", "]": "<rbr>"}


class Kind(enum.Enum):
    INTENT = "IN"
    SLOT = "SL"
    REF = "REF"


class Source(enum.Enum):
    CURRENT_TURN = "current"
    PRIOR_TURN = "prior"
    TRIGGER_SEPARATOR = "separator"


class Form(enum.Enum):
    COMPOSITIONAL = "compositional"
    DECOUPLED = "decoupled"


REF_NAMES = frozenset({"EXPLICIT", "IMPLICIT"})


@dataclass(frozen=True)
class Label:
    kind: Kind
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("label name must be nonempty")

    @property
    def symbol(self) -> str:
        """Opening bracket symbol, e.g. ``[IN:GET_WEATHER``."""
        return f"[{self.kind.value}:{self.name}"

    def __str__(self):
        return f"{self.kind.value}:{self.name}"


@dataclass(frozen=True)
class TokenNode:
    token: str
    source: Source = Source.CURRENT_TURN

    @property
    def is_separator(self) -> bool:
        return self.source is Source.TRIGGER_SEPARATOR


@dataclass(frozen=True)
class LabelNode:
    label: Label
    children: tuple = ()

    def __post_init__(self):
        if not isinstance(self.children, tuple):
            object.__setattr__(self, "children", tuple(self.children))

    @property
    def kind(self) -> Kind:
        return self.label.kind

    @property
    def name(self) -> str:
        return self.label.name


Node = Union[LabelNode, TokenNode]


@dataclass(frozen=True)
class SemanticTree:
    root: LabelNode
    form: Form = Form.DECOUPLED

    @property
    def intent(self) -> str:
        return self.root.name

    def __str__(self):
        from dsp.linearize import linear_string

        return linear_string(self)


# Constructors used throughout tests, converters and the synthetic generator.


def intent(name: str, *children: Node) -> LabelNode:
    return LabelNode(Label(Kind.INTENT, name), tuple(_wrap(c) for c in children))


def slot(name: str, *children: Node | str) -> LabelNode:
    return LabelNode(Label(Kind.SLOT, name), tuple(_wrap(c) for c in children))


def ref(kind: str, antecedent: Sequence[str], trigger: Sequence[str] = ()) -> LabelNode:
    """A REF node holding antecedent tokens and, for explicit refs, a trigger."""
    children = [TokenNode(t, Source.PRIOR_TURN) for t in antecedent]
    if trigger:
        children.append(TokenNode(SEPARATOR, Source.TRIGGER_SEPARATOR))
        children.extend(TokenNode(t) for t in trigger)
    return LabelNode(Label(Kind.REF, kind), tuple(children))


def _wrap(child):
    if isinstance(child, str):
        return TokenNode(child)
    return child


def escape_token(token: str) -> str:
    if token in _ESCAPES:
        return _ESCAPES[token]
    if token.startswith("["):
        return "<lbr>" + token[1:]
    return token


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization; reserved bracket and separator tokens are escaped."""
    return [escape_token(t) for t in text.split()]


def iter_nodes(node: Node, path: tuple = ()) -> Iterator[tuple[tuple, Node]]:
    """Pre-order traversal yielding ``(path, node)`` with child-index paths."""
    yield path, node
    if isinstance(node, LabelNode):
        for i, child in enumerate(node.children):
            yield from iter_nodes(child, path + (i,))


def leaves(tree: SemanticTree | Node) -> list[str]:
    """In-order utterance tokens, skipping trigger separators."""
    node = tree.root if isinstance(tree, SemanticTree) else tree
    return [
        n.token
        for _, n in iter_nodes(node)
        if isinstance(n, TokenNode) and not n.is_separator
    ]


def slot_value(node: LabelNode) -> list[str]:
    """Tokens of a slot subtree, excluding the trigger segment of explicit refs."""
    out = []
    for child in node.children:
        if isinstance(child, TokenNode):
            out.append(child.token)
        elif child.kind is Kind.REF:
            out.extend(ref_antecedent(child))
        else:
            out.extend(slot_value(child))
    return out


def ref_antecedent(node: LabelNode) -> list[str]:
    out = []
    for child in node.children:
        if isinstance(child, TokenNode):
            if child.is_separator:
                break
            out.append(child.token)
    return out


def collect_slots(tree: SemanticTree) -> list[tuple[tuple, str, list[str]]]:
    """``(path, slot name, value tokens)`` for every slot, depth-first."""
    return [
        (path, node.name, slot_value(node))
        for path, node in iter_nodes(tree.root)
        if isinstance(node, LabelNode) and node.kind is Kind.SLOT
    ]


def count_refs(tree: SemanticTree) -> int:
    return sum(
        1
        for _, n in iter_nodes(tree.root)
        if isinstance(n, LabelNode) and n.kind is Kind.REF
    )


def count_intents(tree: SemanticTree) -> int:
    return sum(
        1
        for _, n in iter_nodes(tree.root)
        if isinstance(n, LabelNode) and n.kind is Kind.INTENT
    )


@dataclass(frozen=True)
class Violation:
    path: tuple
    rule: str
    message: str

    def __str__(self):
        where = "/".join(map(str, self.path)) or "<root>"
        return f"{where}: [{self.rule}] {self.message}"


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def add(self, path, rule, message):
        self.violations.append(Violation(tuple(path), rule, message))


def _check_common(root: Node, report: ValidationReport):
    if not isinstance(root, LabelNode) or root.kind is not Kind.INTENT:
        report.add((), "root-intent", "root must be an intent")
    for path, node in iter_nodes(root):
        if isinstance(node, TokenNode):
            if node.is_separator and node.token != SEPARATOR:
                report.add(path, "separator-token", f"separator holds {node.token!r}")
            continue
        if node.kind is Kind.REF and node.name not in REF_NAMES:
            report.add(path, "ref-name", f"unknown ref kind {node.name!r}")


def _check_leaf_intents(root: LabelNode, report: ValidationReport, allow_leaf_intent):
    for path, node in iter_nodes(root):
        if isinstance(node, LabelNode) and node.kind is Kind.INTENT:
            if not any(
                isinstance(c, LabelNode) and c.kind is Kind.SLOT for c in node.children
            ) and not allow_leaf_intent:
                report.add(path, "leaf-intent", f"intent {node.name} has no slots")


def validate_compositional(
    tree: SemanticTree, utterance: Sequence[str], allow_leaf_intent: bool = False
) -> ValidationReport:
    report = ValidationReport()
    root = tree.root
    _check_common(root, report)
    for path, node in iter_nodes(root):
        if isinstance(node, TokenNode):
            if node.is_separator:
                report.add(path, "separator-placement", "separator outside a ref")
            continue
        if not node.children:
            report.add(path, "empty-node", f"{node.label} has no children")
        if node.kind is Kind.REF:
            report.add(path, "ref-in-compositional", "refs only exist in decoupled trees")
        elif node.kind is Kind.INTENT:
            for i, c in enumerate(node.children):
                if isinstance(c, LabelNode) and c.kind is not Kind.SLOT:
                    report.add(path + (i,), "intent-child", f"{c.label} directly under intent")
        else:
            nested = [c for c in node.children if isinstance(c, LabelNode)]
            if any(c.kind is not Kind.INTENT for c in nested):
                report.add(path, "slot-child", "slot children must be tokens or intents")
            if len(nested) > 1:
                report.add(path, "multi-intent-slot", "slot holds more than one intent")
    _check_leaf_intents(root, report, allow_leaf_intent)
    got = leaves(tree)
    if got != list(utterance):
        report.add((), "leaf-utterance", f"leaf/utterance mismatch: {got} vs {list(utterance)}")
    return report


def validate_decoupled(tree: SemanticTree, allow_leaf_intent: bool = False) -> ValidationReport:
    report = ValidationReport()
    root = tree.root
    _check_common(root, report)
    for path, node in iter_nodes(root):
        if isinstance(node, TokenNode):
            continue
        children = node.children
        if not children and not (node.kind is Kind.INTENT and allow_leaf_intent):
            report.add(path, "empty-node", f"{node.label} has no children")
        if node.kind is Kind.INTENT:
            for i, c in enumerate(children):
                if isinstance(c, TokenNode):
                    report.add(path + (i,), "token-outside-slot", "token outside slot")
                elif c.kind is not Kind.SLOT:
                    report.add(path + (i,), "intent-child", f"{c.label} directly under intent")
        elif node.kind is Kind.SLOT:
            _check_slot_children(node, path, report)
        else:
            _check_ref_children(node, path, report)
    _check_leaf_intents(root, report, allow_leaf_intent)
    return report


def _check_slot_children(node: LabelNode, path, report):
    nested = [c for c in node.children if isinstance(c, LabelNode)]
    if not nested:
        for i, c in enumerate(node.children):
            if c.is_separator:
                report.add(path + (i,), "separator-placement", "separator outside a ref")
        return
    if len(node.children) > 1:
        report.add(path, "slot-mixed", "slot with a nested node must hold only that node")
    if nested[0].kind is Kind.SLOT:
        report.add(path, "slot-child", "slot directly under slot")


def _check_ref_children(node: LabelNode, path, report):
    seps = []
    for i, c in enumerate(node.children):
        if isinstance(c, LabelNode):
            report.add(path + (i,), "ref-child", "ref children must be tokens")
        elif c.is_separator:
            seps.append(i)
    if not seps:
        return
    if node.name == "IMPLICIT":
        report.add(path, "implicit-trigger", "implicit ref carries a trigger")
    if len(seps) > 1:
        report.add(path, "ref-separator", "more than one trigger separator")
    first = seps[0]
    if first == 0:
        report.add(path, "ref-antecedent", "ref has no antecedent before the trigger")
    if first == len(node.children) - 1:
        report.add(path, "ref-trigger", "trigger separator not followed by trigger tokens")


def validate(tree: SemanticTree, utterance=None, allow_leaf_intent: bool = False) -> ValidationReport:
    """Validate against the tree's declared form."""
    if tree.form is Form.COMPOSITIONAL:
        return validate_compositional(tree, utterance if utterance is not None else leaves(tree),
                                      allow_leaf_intent)
    return validate_decoupled(tree, allow_leaf_intent)
