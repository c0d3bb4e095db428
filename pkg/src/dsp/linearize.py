"""Bracketed serialization of trees and canonical forms for exact match."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from dsp.tree import (
    ROOT_PLACEHOLDER,
    SEPARATOR,
    Form,
    Kind,
    Label,
    LabelNode,
    SemanticTree,
    Source,
    TokenNode,
    slot_value,
    validate,
)

CLOSE = "]"
UNIFIED_REF = "ANY"

_KINDS = {k.value: k for k in Kind}


class LinearizeError(ValueError):
    """Base class for malformed bracketed sequences."""

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at token {position})")
        self.position = position


class UnbalancedBrackets(LinearizeError):
    pass


class EmptyNode(LinearizeError):
    pass


class TokenOutsideNode(LinearizeError):
    pass


class TrailingTokens(LinearizeError):
    pass


class MalformedSymbol(LinearizeError):
    pass


class InvalidTree(ValueError):
    def __init__(self, report):
        super().__init__("; ".join(map(str, report.violations)))
        self.report = report


def is_opener(token: str) -> bool:
    return token.startswith("[") and len(token) > 1


def parse_symbol(token: str, position=None) -> Label:
    kind, _, name = token[1:].partition(":")
    if kind not in _KINDS or not name:
        raise MalformedSymbol(f"malformed ontology symbol {token!r}", position)
    return Label(_KINDS[kind], name)


def _emit(node, out):
    if isinstance(node, TokenNode):
        out.append(node.token)
        return
    out.append(node.label.symbol)
    for child in node.children:
        _emit(child, out)
    out.append(CLOSE)


def linear_tokens(tree: SemanticTree) -> list[str]:
    """Serialize without validating (used for canonical keys and predictions)."""
    out: list[str] = []
    _emit(tree.root, out)
    return out


def linear_string(tree: SemanticTree) -> str:
    return " ".join(linear_tokens(tree))


def to_linear(tree: SemanticTree, allow_leaf_intent: bool = False) -> list[str]:
    report = validate(tree, allow_leaf_intent=allow_leaf_intent)
    if not report.ok:
        raise InvalidTree(report)
    return linear_tokens(tree)


def from_linear(
    seq: Sequence[str] | str,
    form: Form = Form.DECOUPLED,
    allow_leaf_intent: bool = False,
) -> SemanticTree:
    """Parse a bracketed sequence back into a tree.

    Only structure is checked here (balanced brackets, nonempty nodes,
    separator placement). Form-level rules are the validators' business.
    Token provenance is reconstructed from position: tokens inside a REF
    before its ``;`` are prior-turn tokens, everything else is current-turn.
    """
    tokens = seq.split() if isinstance(seq, str) else list(seq)
    if not tokens:
        raise EmptyNode("empty sequence", 0)
    if not is_opener(tokens[0]):
        raise TokenOutsideNode(f"sequence starts with {tokens[0]!r}", 0)

    # stack entries: [label, children, opener position, seen separator]
    stack: list[list] = []
    root = None
    for pos, tok in enumerate(tokens):
        if root is not None:
            raise TrailingTokens(f"tokens after the root closes: {tokens[pos:]}", pos)
        if is_opener(tok):
            stack.append([parse_symbol(tok, pos), [], pos, False])
        elif tok == CLOSE:
            if not stack:
                raise UnbalancedBrackets("unmatched ']'", pos)
            label, children, start, _ = stack.pop()
            if not children and not (allow_leaf_intent and label.kind is Kind.INTENT):
                raise EmptyNode(f"{label} has no children", start)
            last = children[-1] if children else None
            if isinstance(last, TokenNode) and last.is_separator:
                raise EmptyNode(f"{label} ends with a bare separator", pos)
            node = LabelNode(label, tuple(children))
            if stack:
                stack[-1][1].append(node)
            else:
                root = node
        else:
            if not stack:
                raise TokenOutsideNode(f"token {tok!r} outside any node", pos)
            top = stack[-1]
            label = top[0]
            if tok == SEPARATOR:
                if label.kind is not Kind.REF or top[3] or not top[1]:
                    raise MalformedSymbol("misplaced trigger separator", pos)
                top[3] = True
                top[1].append(TokenNode(SEPARATOR, Source.TRIGGER_SEPARATOR))
            elif label.kind is Kind.REF and not top[3]:
                top[1].append(TokenNode(tok, Source.PRIOR_TURN))
            else:
                top[1].append(TokenNode(tok))
    if root is None:
        raise UnbalancedBrackets(f"{len(stack)} unclosed bracket(s)", stack[-1][2])
    return SemanticTree(root, form)


@dataclass(frozen=True)
class CanonPolicy:
    collapse_ref_kinds: bool = False
    strip_root_intent: bool = False
    sort_sibling_slots: bool = False


def _collapse_refs(node):
    if isinstance(node, TokenNode):
        return node
    if node.kind is Kind.REF:
        kept = []
        for c in node.children:
            if isinstance(c, TokenNode) and c.is_separator:
                break
            kept.append(c)
        return LabelNode(Label(Kind.REF, UNIFIED_REF), tuple(kept))
    return LabelNode(node.label, tuple(_collapse_refs(c) for c in node.children))


def _slot_key(node):
    if isinstance(node, LabelNode) and node.kind is Kind.SLOT:
        out: list[str] = []
        _emit(node, out)
        return (0, node.name, slot_value(node), out)
    return (1,)


def _sort_slots(node):
    if isinstance(node, TokenNode):
        return node
    children = [_sort_slots(c) for c in node.children]
    if node.kind is Kind.INTENT:
        slots = sorted(
            (c for c in children if isinstance(c, LabelNode) and c.kind is Kind.SLOT),
            key=_slot_key,
        )
        # non-slot children (compositional tokens) keep their positions
        it = iter(slots)
        children = [
            next(it) if isinstance(c, LabelNode) and c.kind is Kind.SLOT else c
            for c in children
        ]
    return LabelNode(node.label, tuple(children))


def canonicalize(tree: SemanticTree, policy: CanonPolicy = CanonPolicy()) -> SemanticTree:
    root = tree.root
    if policy.collapse_ref_kinds:
        root = _collapse_refs(root)
    if policy.strip_root_intent:
        root = LabelNode(Label(Kind.INTENT, ROOT_PLACEHOLDER), root.children)
    if policy.sort_sibling_slots:
        root = _sort_slots(root)
    return replace(tree, root=root)


def canonical_string(tree: SemanticTree, policy: CanonPolicy = CanonPolicy()) -> str:
    """Exact-match key: single-space-joined tokens of the canonical tree."""
    return linear_string(canonicalize(tree, policy))

