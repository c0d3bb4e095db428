"""Multi-turn sessions: encoder input assembly, REF resolution, carryover facts."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from dsp.linearize import from_linear, linear_string
from dsp.tree import (
    Kind,
    LabelNode,
    SemanticTree,
    TokenNode,
    collect_slots,
    iter_nodes,
    ref_antecedent,
    tokenize,
)

SEP = "<sep>"


class Role(enum.Enum):
    USER = "user"
    ASSISTANT = "assistant"


class SessionError(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class UnresolvedRef(SessionError):
    pass


@dataclass(frozen=True)
class Turn:
    role: Role
    tokens: tuple
    gold: Optional[SemanticTree] = None

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.role is Role.ASSISTANT and self.gold is not None:
            raise SessionError("assistant turns carry no parse")


@dataclass(frozen=True)
class Session:
    id: str
    turns: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))
        if not self.turns:
            raise SessionError(f"session {self.id!r} has no turns")
        if not any(t.role is Role.USER for t in self.turns):
            raise SessionError(f"session {self.id!r} has no user turn")

    @property
    def user_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.turns) if t.role is Role.USER]

    def gold_trees(self) -> list[SemanticTree]:
        return [t.gold for t in self.turns if t.role is Role.USER and t.gold is not None]


@dataclass(frozen=True)
class EncoderInput:
    tokens: tuple
    # (turn index, token index) per position; None marks a separator
    origins: tuple


def build_encoder_input(
    session: Session, upto: int, separator: str = SEP, include_assistant: bool = True
) -> EncoderInput:
    """Concatenate turns ``0..upto`` with one separator between consecutive turns."""
    if not 0 <= upto < len(session.turns):
        raise IndexOutOfRange(f"turn {upto} outside session of {len(session.turns)} turns")
    if session.turns[upto].role is not Role.USER:
        raise SessionError(f"turn {upto} is not a user turn")
    tokens: list[str] = []
    origins: list = []
    for i, turn in enumerate(session.turns[: upto + 1]):
        if turn.role is Role.ASSISTANT and not include_assistant:
            continue
        if tokens:
            tokens.append(separator)
            origins.append(None)
        tokens.extend(turn.tokens)
        origins.extend((i, j) for j in range(len(turn.tokens)))
    return EncoderInput(tuple(tokens), tuple(origins))


def _norm(tokens: Iterable[str]) -> tuple:
    return tuple(t.lower() for t in tokens)


@dataclass(frozen=True)
class RefMatch:
    path: tuple
    kind: str
    antecedent: tuple
    turn: int  # first prior turn whose slots hold the antecedent


def match_refs(tree: SemanticTree, prior_gold: Sequence[SemanticTree]) -> list[RefMatch]:
    values = [
        {_norm(value) for _, _, value in collect_slots(t)} for t in prior_gold
    ]
    matches = []
    for path, node in iter_nodes(tree.root):
        if not (isinstance(node, LabelNode) and node.kind is Kind.REF):
            continue
        antecedent = tuple(ref_antecedent(node))
        turn = next((i for i, vs in enumerate(values) if _norm(antecedent) in vs), None)
        if turn is None:
            raise UnresolvedRef(f"ref at {path} with antecedent {list(antecedent)} matches no prior slot")
        matches.append(RefMatch(path, node.name, antecedent, turn))
    return matches


def _inline_refs(node):
    if isinstance(node, TokenNode):
        return (node,)
    if node.kind is Kind.REF:
        return tuple(TokenNode(t) for t in ref_antecedent(node))
    children = []
    for c in node.children:
        children.extend(_inline_refs(c))
    return (LabelNode(node.label, tuple(children)),)


def resolve_refs(tree: SemanticTree, prior_gold: Sequence[SemanticTree]) -> SemanticTree:
    """Replace every REF by its antecedent tokens (the informationally complete parse)."""
    match_refs(tree, prior_gold)
    (root,) = _inline_refs(tree.root)
    return SemanticTree(root, tree.form)


@dataclass(frozen=True)
class CarryoverFact:
    turn_index: int
    label: str
    value: tuple
    distance: int


def extract_carryover(
    trees: Sequence[SemanticTree], positions: Optional[Sequence[int]] = None
) -> list[CarryoverFact]:
    """One fact per slot instance; distance counts turns since first appearance.

    ``positions`` maps each tree to the turn index used for distances (the
    default is the tree's index, i.e. user turns only).
    """
    positions = list(range(len(trees))) if positions is None else list(positions)
    if len(positions) != len(trees):
        raise SessionError("positions and trees differ in length")
    first_seen: dict = {}
    facts = []
    for tree, pos in zip(trees, positions):
        for _, name, value in collect_slots(tree):
            key = (name, _norm(value))
            first_seen.setdefault(key, pos)
            facts.append(CarryoverFact(pos, name, tuple(value), pos - first_seen[key]))
    return facts


def session_carryover(session: Session, count_all_turns: bool = False) -> list[CarryoverFact]:
    idx = [i for i in session.user_indices if session.turns[i].gold is not None]
    trees = [session.turns[i].gold for i in idx]
    return extract_carryover(trees, idx if count_all_turns else None)


def distance_bucket(distance: int) -> str:
    return str(distance) if distance < 3 else ">=3"


BUCKETS = ("0", "1", "2", ">=3")


# JSON-lines session files: {"id", "turns": [{"role", "text", "parse"?}]}


def session_from_json(obj: dict, allow_leaf_intent: bool = True) -> Session:
    turns = []
    for t in obj["turns"]:
        role = Role(t.get("role", "user"))
        gold = None
        if t.get("parse"):
            gold = from_linear(t["parse"], allow_leaf_intent=allow_leaf_intent)
        turns.append(Turn(role, tokenize(t["text"]), gold))
    return Session(str(obj["id"]), turns)


def session_to_json(session: Session) -> dict:
    turns = []
    for t in session.turns:
        item = {"role": t.role.value, "text": " ".join(t.tokens)}
        if t.gold is not None:
            item["parse"] = linear_string(t.gold)
        turns.append(item)
    return {"id": session.id, "turns": turns}


def dumps_session(session: Session) -> str:
    return json.dumps(session_to_json(session), ensure_ascii=False)
