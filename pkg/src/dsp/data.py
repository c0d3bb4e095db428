"""Dataset ingestion.

Four on-disk formats are understood. All of them load into decoupled
:class:`~dsp.session.Session` objects (single-turn formats give one-turn
sessions) and re-serialize to session JSON lines.

``TopTsv``
    ``[raw utterance TAB] utterance TAB compositional-tree``; the tree is
    decoupled on load.
``SessionJsonl``
    ``{"id", "turns": [{"role", "text", "parse"?}]}`` per line.
``FlatTsv``
    ``intent TAB utterance TAB slot:start:end,...`` with token offsets.
``DialogueStateJsonl``
    ``{"id", "turns": [{"role", "text", "intent"?, "state"?: {slot: value}}]}``
    per line; user turns with an intent become sorted-slot trees.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from dsp.convert import (
    ConversionError,
    DialogueState,
    decouple,
    flat_to_decoupled,
    parse_flat_line,
    state_to_tree,
)
from dsp.linearize import LinearizeError, from_linear
from dsp.session import Role, Session, SessionError, Turn, dumps_session, session_from_json
from dsp.tree import Form, Kind, count_intents, iter_nodes, LabelNode, tokenize, validate

logger = logging.getLogger(__name__)

DATA_ENV = "DSP_DATA_DIR"
SBTOP_DIR = "sbtop"


class Format(enum.Enum):
    TOP_TSV = "top"
    SESSION_JSONL = "session"
    FLAT_TSV = "flat"
    STATE_JSONL = "state"


class Split(enum.Enum):
    TRAIN = "train"
    VALID = "valid"
    TEST = "test"


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, line: int = 0, path=None):
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.path = path


class ValidationError(DatasetError):
    def __init__(self, message: str, line: int = 0, tree_path: tuple = (), path=None):
        where = f"{path}:{line}" if path else f"line {line}"
        super().__init__(f"{where}: {message}")
        self.line = line
        self.tree_path = tree_path
        self.path = path


class FormatMismatch(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    format: Format
    path: Path
    split: Split = Split.TRAIN

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))
        object.__setattr__(self, "format", Format(self.format))
        object.__setattr__(self, "split", Split(self.split))


@dataclass
class DatasetStats:
    size: int = 0
    ref_tags: int = 0
    avg_session_length: float = 0.0
    avg_utterance_length: float = 0.0
    avg_intents: float = 0.0

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Dataset:
    spec: DatasetSpec
    sessions: list = field(default_factory=list)
    stats: DatasetStats = field(default_factory=DatasetStats)
    line_numbers: list = field(default_factory=list)  # source line of each session


_SPAN = re.compile(r"^\s*$|^[^:,\s]+:\d+:\d+(\s*,\s*[^:,\s]+:\d+:\d+)*\s*$")


def sniff_format(path) -> Format:
    """Guess the format from the first nonblank line."""
    with open(path, encoding="utf-8") as f:
        first = next((ln for ln in f if ln.strip()), None)
    if first is None:
        raise ParseError("empty file", 0, path)
    text = first.strip()
    if text.startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", 1, path) from None
        turns = obj.get("turns", []) if isinstance(obj, dict) else []
        if any(isinstance(t, dict) and ("state" in t or "intent" in t) for t in turns):
            return Format.STATE_JSONL
        return Format.SESSION_JSONL
    parts = first.rstrip("\n").split("\t")
    if len(parts) in (2, 3) and parts[-1].strip().startswith("["):
        return Format.TOP_TSV
    if len(parts) in (2, 3) and (len(parts) == 2 or _SPAN.match(parts[2])):
        return Format.FLAT_TSV
    raise ParseError("unrecognized dataset format", 1, path)


def _lines(path, line_range):
    start, end = line_range or (0, None)
    with open(path, encoding="utf-8") as f:
        for no, line in enumerate(f, 1):
            if no <= start:
                continue
            if end is not None and no > end:
                break
            if line.strip():
                yield no, line


def _check_tree(tree, no, path, utterance=None, allow_leaf_intent=True):
    report = validate(tree, utterance, allow_leaf_intent=allow_leaf_intent)
    if not report.ok:
        v = report.violations[0]
        raise ValidationError(str(v), no, v.path, path)


def _top_session(no, line, path) -> Session:
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (2, 3):
        raise ParseError(f"expected 2 or 3 tab-separated fields, got {len(parts)}", no, path)
    utterance = tokenize(parts[-2])
    try:
        tree = from_linear(parts[-1], form=Form.COMPOSITIONAL, allow_leaf_intent=True)
    except LinearizeError as e:
        raise ParseError(f"bad tree: {e}", no, path) from None
    _check_tree(tree, no, path, utterance)
    return Session(f"{path.stem}-{no}", [Turn(Role.USER, utterance, decouple(tree, check=False))])


def _flat_session(no, line, path) -> Session:
    try:
        frame, utterance = parse_flat_line(line)
    except ValueError as e:
        raise ParseError(str(e), no, path) from None
    try:
        tree = flat_to_decoupled(frame, utterance)
    except ConversionError as e:
        raise ValidationError(str(e), no, (), path) from None
    return Session(f"{path.stem}-{no}", [Turn(Role.USER, utterance, tree)])


def _json(no, line, path) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", no, path) from None
    if not isinstance(obj, dict) or not isinstance(obj.get("turns"), list):
        raise ParseError("expected an object with a 'turns' list", no, path)
    return obj


def _session_session(no, line, path) -> Session:
    obj = _json(no, line, path)
    try:
        session = session_from_json(obj)
    except LinearizeError as e:
        raise ParseError(f"bad tree: {e}", no, path) from None
    except (SessionError, KeyError, ValueError) as e:
        raise ParseError(str(e), no, path) from None
    for turn in session.turns:
        if turn.gold is not None:
            _check_tree(turn.gold, no, path)
    return session


def _state_session(no, line, path) -> Session:
    obj = _json(no, line, path)
    turns = []
    try:
        for t in obj["turns"]:
            role = Role(t.get("role", "user"))
            gold = None
            if role is Role.USER and t.get("intent"):
                constraints = tuple((k, v) for k, v in (t.get("state") or {}).items())
                gold = state_to_tree(DialogueState(t["intent"], constraints))
            turns.append(Turn(role, tokenize(t["text"]), gold))
        return Session(str(obj.get("id", f"{path.stem}-{no}")), turns)
    except ConversionError as e:
        raise ValidationError(str(e), no, (), path) from None
    except (SessionError, KeyError, ValueError) as e:
        raise ParseError(str(e), no, path) from None


_READERS = {
    Format.TOP_TSV: _top_session,
    Format.FLAT_TSV: _flat_session,
    Format.SESSION_JSONL: _session_session,
    Format.STATE_JSONL: _state_session,
}


def compute_stats(sessions: Iterable[Session]) -> DatasetStats:
    sessions = list(sessions)
    stats = DatasetStats(size=len(sessions))
    if not sessions:
        return stats
    n_turns = n_user = n_tokens = n_trees = n_intents = 0
    for s in sessions:
        n_turns += len(s.turns)
        for turn in s.turns:
            if turn.role is not Role.USER:
                continue
            n_user += 1
            n_tokens += len(turn.tokens)
            if turn.gold is not None:
                n_trees += 1
                n_intents += count_intents(turn.gold)
                stats.ref_tags += sum(
                    1 for _, n in iter_nodes(turn.gold.root) if isinstance(n, LabelNode) and n.kind is Kind.REF
                )
    stats.avg_session_length = n_turns / len(sessions)
    stats.avg_utterance_length = n_tokens / n_user if n_user else 0.0
    stats.avg_intents = n_intents / n_trees if n_trees else 0.0
    return stats


def load_dataset(spec: DatasetSpec, line_range: Optional[tuple] = None, check_format: bool = True) -> Dataset:
    """Read, convert and validate a dataset file.

    ``line_range`` = (start, end) restricts reading to physical lines
    ``start+1..end`` so large files can be sharded.
    """
    path = spec.path
    if not path.is_file():
        raise ParseError("no such file", 0, path)
    if check_format:
        sniffed = sniff_format(path)
        if sniffed is not spec.format:
            raise FormatMismatch(f"{path}: declared {spec.format.value}, looks like {sniffed.value}")
    reader = _READERS[spec.format]
    data = Dataset(spec)
    for no, line in _lines(path, line_range):
        data.sessions.append(reader(no, line, path))
        data.line_numbers.append(no)
    if not data.sessions and line_range is None:
        raise ParseError("empty file", 0, path)
    data.stats = compute_stats(data.sessions)
    return data


def dump_sessions(sessions: Iterable[Session], path) -> None:
    """Write sessions as JSON lines (the canonical serialization)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in sessions:
            f.write(dumps_session(s) + "\n")


# reference statistics of the session-based TOP release
REFERENCE_STATS = {
    Split.TRAIN: DatasetStats(62807, 2900, 1.861, 8.314, 1.519),
    Split.VALID: DatasetStats(1004, 146, 4.024, 6.600, 1.723),
    Split.TEST: DatasetStats(1004, 108, 4.007, 6.929, 1.164),
}


@dataclass
class StatsCheck:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


def check_stats(stats: DatasetStats, split: Split, tol: float = 1e-3) -> StatsCheck:
    """Counts must match exactly; averages only warn (the published train
    session length is suspiciously low next to valid/test)."""
    ref = REFERENCE_STATS[Split(split)]
    out = StatsCheck()
    for name in ("size", "ref_tags"):
        got, want = getattr(stats, name), getattr(ref, name)
        if got != want:
            out.errors.append(f"{name}: got {got}, expected {want}")
    for name in ("avg_session_length", "avg_utterance_length", "avg_intents"):
        got, want = getattr(stats, name), getattr(ref, name)
        if abs(got - want) > tol:
            msg = f"{name}: got {got:.3f}, expected {want:.3f}"
            out.warnings.append(msg)
            logger.warning("%s split %s", split.value if isinstance(split, Split) else split, msg)
    return out


def sbtop_path(split: Split) -> Optional[Path]:
    """``$DSP_DATA_DIR/sbtop/<split>.jsonl`` if present."""
    root = os.environ.get(DATA_ENV)
    if not root:
        return None
    path = Path(root) / SBTOP_DIR / f"{Split(split).value}.jsonl"
    return path if path.is_file() else None
