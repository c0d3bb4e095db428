"""Seeded generators: random trees for property tests and a session grammar.

The session grammar produces multi-turn sessions across weather, traffic,
events, navigation, calling, messaging, reminder and music intents. Later
turns may reuse a value from an earlier turn either through an explicit
pronoun trigger (``traffic there``) or implicitly by omitting it.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from typing import Optional

from dsp.session import Role, Session, Turn
from dsp.tree import (
    Form,
    LabelNode,
    SemanticTree,
    intent,
    ref,
    slot,
)

# ---------------------------------------------------------------- random trees

_WORDS = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima mike "
    "november oscar papa quebec romeo sierra tango uniform victor whiskey xray yankee zulu "
    "red orange yellow green blue indigo violet black white grey brown pink "
    "one two three four five six seven eight nine ten eleven twelve "
    "north south east west up down left right near far over under "
    "cat dog bird fish horse cow sheep goat lion tiger bear wolf fox owl"
).split()
_INTENTS = [f"I{i}" for i in range(8)]
_SLOTS = [f"S{i}" for i in range(10)]


def random_compositional_tree(rng: random.Random, max_depth: int = 3) -> SemanticTree:
    """Random compositional tree with distinct tokens.

    Nested intents carry loose tokens only between their slots and slots
    holding an intent hold nothing else, so the tree is exactly recoverable
    from its decoupled form and leaves.
    """
    pool = iter(rng.sample(_WORDS, len(_WORDS)))

    def words(lo, hi):
        return [next(pool) for _ in range(rng.randint(lo, hi))]

    def make_intent(depth, is_root):
        n = rng.randint(1, 3)
        children: list = []
        if is_root:
            children += words(0, 2)
        for k in range(n):
            if k:
                children += words(0, 2)
            if depth < max_depth and rng.random() < 0.3:
                children.append(slot(rng.choice(_SLOTS), make_intent(depth + 1, False)))
            else:
                children.append(slot(rng.choice(_SLOTS), *words(1, 3)))
        if is_root:
            children += words(0, 2)
        return intent(rng.choice(_INTENTS), *children)

    return SemanticTree(make_intent(1, True), Form.COMPOSITIONAL)


def random_decoupled_tree(rng: random.Random, max_depth: int = 3, p_ref: float = 0.25) -> SemanticTree:
    """Random decoupled tree, including explicit and implicit REF nodes."""

    def toks(lo, hi):
        return [rng.choice(_WORDS) for _ in range(rng.randint(lo, hi))]

    def make_slot(depth):
        name = rng.choice(_SLOTS)
        r = rng.random()
        if r < p_ref:
            if rng.random() < 0.5:
                trigger = toks(1, 2) if rng.random() < 0.8 else []
                return slot(name, ref("EXPLICIT", toks(1, 3), trigger))
            return slot(name, ref("IMPLICIT", toks(1, 3)))
        if depth < max_depth and r < p_ref + 0.25:
            return slot(name, make_intent(depth + 1))
        return slot(name, *toks(1, 3))

    def make_intent(depth):
        return intent(rng.choice(_INTENTS), *(make_slot(depth) for _ in range(rng.randint(1, 3))))

    return SemanticTree(make_intent(1), Form.DECOUPLED)


# ------------------------------------------------------------- session grammar

_TEMPLATES = {
    "GET_WEATHER": [
        "what is the weather <in:LOCATION> <DATE_TIME?>",
        "weather <in:LOCATION>",
        "will it rain <in:LOCATION> <DATE_TIME?>",
        "how cold is it <in:LOCATION>",
    ],
    "GET_TRAFFIC": [
        "traffic <in:LOCATION>",
        "how is the traffic <in:LOCATION> <DATE_TIME?>",
        "is the road busy <near:LOCATION>",
    ],
    "GET_EVENT": [
        "any events <in:LOCATION> <DATE_TIME?>",
        "what is going on <in:LOCATION>",
        "find concerts <in:LOCATION> <DATE_TIME?>",
    ],
    "GET_DIRECTIONS": [
        "directions <to:LOCATION>",
        "how do i get <to:LOCATION>",
        "navigate <to:LOCATION> <DATE_TIME?>",
    ],
    "CREATE_CALL": [
        "call <CONTACT>",
        "give <CONTACT> a call",
        "video call <CONTACT> <DATE_TIME?>",
    ],
    "SEND_MESSAGE": [
        "text <CONTACT> <saying:CONTENT>",
        "send a message <to:CONTACT> <saying:CONTENT>",
    ],
    "CREATE_REMINDER": [
        "remind <PERSON_REMINDED> to <TODO> <DATE_TIME?>",
        "set a reminder <for:PERSON_REMINDED> to <TODO>",
    ],
    "PLAY_MUSIC": [
        "play <SONG> <by:ARTIST>",
        "play something <by:ARTIST>",
        "put on some <GENRE>",
        "play <GENRE> <by:ARTIST?>",
    ],
    "FOLLOW_ARTIST": [
        "follow <ARTIST>",
        "add <ARTIST> to my favorites",
    ],
}

_LEXICON = {
    "LOCATION": (
        "san francisco|new york|boston|chicago|seattle|denver|austin|miami|atlanta|dallas|"
        "portland|phoenix|las vegas|los angeles|san diego|salt lake city|detroit|houston|"
        "philadelphia|nashville|new orleans|kansas city|st louis|pittsburgh|cleveland|"
        "minneapolis|baltimore|orlando|tampa|raleigh|charlotte|omaha|tucson|fresno|"
        "sacramento|oakland|long beach|buffalo|memphis|louisville|richmond|boise|"
        "anchorage|honolulu|santa fe|el paso|reno|spokane|madison|albany"
    ),
    "DATE_TIME": (
        "tomorrow|tonight|today|this weekend|on monday|on tuesday|on wednesday|on thursday|"
        "on friday|on saturday|on sunday|next week|at noon|at 8am|at 6pm|in the morning|"
        "this evening|next month|at midnight|at 7am"
    ),
    "CONTACT": (
        "john|mary|mom|dad|alice|bob|carol|dave|erin|frank|grace|heidi|ivan|judy|"
        "mallory|oscar|peggy|trent|victor|walter|john smith|mary jones|aunt sue|uncle joe|"
        "my boss|my sister|my brother|grandma|grandpa|sarah|kevin|laura|mike|nina|paul|"
        "rachel|steve|tina|uma|wendy"
    ),
    "CONTENT": (
        "i am running late|see you soon|call me back|happy birthday|on my way|"
        "dinner is ready|good luck today|i miss you|meet me at noon|thanks for everything|"
        "where are you|bring the keys|pick up milk|lets talk later|good night"
    ),
    "PERSON_REMINDED": "me|us|my wife|my husband|the kids",
    "TODO": (
        "buy milk|pay the rent|water the plants|walk the dog|book a table|take my pills|"
        "clean the garage|renew my passport|feed the cat|pick up the laundry|"
        "send the report|charge my phone|return the books|call the bank"
    ),
    "SONG": (
        "hey jude|yellow|hello|bad guy|halo|imagine|creep|wonderwall|thriller|"
        "royals|shallow|believer|stay|happy|roar|umbrella|faded|closer|animals|sorry"
    ),
    "ARTIST": (
        "adele|drake|coldplay|the beatles|queen|madonna|rihanna|eminem|radiohead|"
        "beyonce|lorde|muse|oasis|blur|prince|shakira|sia|u2|abba|metallica|"
        "taylor swift|bruno mars|lady gaga|ed sheeran|billie eilish"
    ),
    "GENRE": "jazz|rock|pop|blues|reggae|techno|salsa|country|classical|hip hop|funk|soul|metal|disco|folk",
}

_TRIGGERS = {
    "LOCATION": ["there"],
    "CONTACT": ["him", "her", "them"],
    "ARTIST": ["them", "him", "her"],
}

_ASSISTANT = [
    "here is what i found",
    "sure",
    "ok done",
    "anything else",
    "let me check",
]

_SLOT_RE = re.compile(r"<(?:([a-z_]+):)?([A-Z_]+)(\?)?>")


@dataclass
class SynthGrammar:
    """Session grammar with reference injection probabilities.

    ``p_explicit``/``p_implicit`` govern how a follow-up turn realizes the
    session's topic slot: pronoun trigger, omission, or (otherwise) a fresh
    filler. ``lexicon_split`` selects the train or held-out part of the
    lexicon of every slot in ``heldout_slots`` (open-class names); the
    closed-class slots keep their full lexicon in both splits.
    """

    seed: int = 0
    p_explicit: float = 0.25
    p_implicit: float = 0.25
    p_nesting: float = 0.5
    p_optional: float = 0.4
    p_assistant: float = 0.3
    min_turns: int = 1
    max_turns: int = 4
    heldout_fraction: float = 0.3
    lexicon_split: str = "all"
    heldout_slots: tuple = ("LOCATION", "CONTACT", "SONG", "ARTIST")
    templates: dict = field(default_factory=lambda: dict(_TEMPLATES))
    lexicon: dict = field(default_factory=lambda: {k: v.split("|") for k, v in _LEXICON.items()})
    triggers: dict = field(default_factory=lambda: dict(_TRIGGERS))

    def __post_init__(self):
        for name in ("p_explicit", "p_implicit", "p_nesting", "p_optional", "p_assistant"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")
        if self.p_explicit + self.p_implicit > 1.0:
            raise ValueError("p_explicit + p_implicit must not exceed 1")
        if not 1 <= self.min_turns <= self.max_turns:
            raise ValueError("need 1 <= min_turns <= max_turns")
        if self.lexicon_split not in ("all", "train", "heldout"):
            raise ValueError(f"unknown lexicon split {self.lexicon_split!r}")

    def fillers(self, slot_name: str) -> list[str]:
        values = list(self.lexicon[slot_name])
        if self.lexicon_split == "all" or slot_name not in self.heldout_slots:
            return values
        # split is a property of the grammar, not of the sampling seed
        order = random.Random(f"split:{slot_name}").sample(values, len(values))
        cut = max(1, int(round(len(values) * self.heldout_fraction)))
        return order[cut:] if self.lexicon_split == "train" else order[:cut]


def _slots_of(template: str) -> list[str]:
    return [m.group(2) for m in _SLOT_RE.finditer(template)]


class _SessionBuilder:
    def __init__(self, grammar: SynthGrammar, rng: random.Random):
        self.g = grammar
        self.rng = rng

    def filler(self, name):
        return self.rng.choice(self.g.fillers(name)).split()

    def frames_with(self, topic):
        out = []
        for name, templates in self.g.templates.items():
            for t in templates:
                names = _slots_of(t)
                if topic in names or (topic == "CONTACT" and "TODO" in names and self.g.p_nesting > 0):
                    out.append((name, t))
        return out

    def realize(self, intent_name, template, topic=None, mode="fresh", value=None):
        """Return (tokens, intent node). ``mode`` is fresh/explicit/implicit."""
        tokens: list[str] = []
        slots: list[LabelNode] = []
        pos = 0
        for m in _SLOT_RE.finditer(template):
            tokens += template[pos : m.start()].split()
            pos = m.end()
            prefix, name, optional = m.group(1), m.group(2), m.group(3)
            prefix_toks = prefix.replace("_", " ").split() if prefix else []
            if name == topic:
                if mode == "explicit":
                    trigger = [self.rng.choice(self.g.triggers[name])]
                    tokens += trigger
                    slots.append(slot(name, ref("EXPLICIT", value, trigger)))
                elif mode == "implicit":
                    slots.append(slot(name, ref("IMPLICIT", value)))
                else:
                    tokens += prefix_toks + list(value)
                    slots.append(slot(name, *value))
                continue
            if optional and self.rng.random() >= self.g.p_optional:
                continue
            if name == "TODO":
                # a CONTACT topic can only reach TODO through a nested call
                forced = topic == "CONTACT" and self.g.p_nesting > 0
                nested = forced or self.rng.random() < self.g.p_nesting
                if nested:
                    sub = "CREATE_CALL" if topic == "CONTACT" or self.rng.random() < 0.5 else "SEND_MESSAGE"
                    sub_t = self.rng.choice(self.g.templates[sub])
                    sub_tokens, sub_node = self.realize(sub, sub_t, topic, mode, value)
                    tokens += prefix_toks + sub_tokens
                    slots.append(slot(name, sub_node))
                    continue
            v = self.filler(name)
            tokens += prefix_toks + v
            slots.append(slot(name, *v))
        tokens += template[pos:].split()
        return tokens, intent(intent_name, *slots)

    def session(self, sid, n_turns):
        g, rng = self.g, self.rng
        topic = rng.choice(sorted(g.triggers))
        frames = self.frames_with(topic)
        value = self.filler(topic)
        turns = []
        for k in range(n_turns):
            name, template = rng.choice(frames)
            mode = "fresh"
            if k:
                r = rng.random()
                if r < g.p_implicit:
                    mode = "implicit"
                elif r < g.p_implicit + g.p_explicit:
                    mode = "explicit"
                else:
                    value = self.filler(topic)
            tokens, node = self.realize(name, template, topic, mode, value)
            turns.append(Turn(Role.USER, tokens, SemanticTree(node, Form.DECOUPLED)))
            if k < n_turns - 1 and rng.random() < g.p_assistant:
                turns.append(Turn(Role.ASSISTANT, rng.choice(_ASSISTANT).split()))
        return Session(sid, turns)


def generate_synthetic(grammar: SynthGrammar, n_sessions: int, prefix: Optional[str] = None) -> list[Session]:
    """Deterministic (given ``grammar.seed``) list of synthetic sessions."""
    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    rng = random.Random(grammar.seed)
    builder = _SessionBuilder(grammar, rng)
    prefix = prefix or f"synth-{grammar.seed}"
    return [
        builder.session(f"{prefix}-{i:05d}", rng.randint(grammar.min_turns, grammar.max_turns))
        for i in range(n_sessions)
    ]

