import random

import pytest
from hypothesis import given, settings, strategies as st

from dsp.linearize import (
    CanonPolicy,
    EmptyNode,
    InvalidTree,
    MalformedSymbol,
    TokenOutsideNode,
    TrailingTokens,
    UnbalancedBrackets,
    canonical_string,
    canonicalize,
    from_linear,
    linear_string,
    to_linear,
)
from dsp.synth import random_compositional_tree, random_decoupled_tree
from dsp.tree import Form, SemanticTree, intent, leaves, slot, Kind

from conftest import REMINDER_DECOUPLED


def test_reminder_dec_linearization(reminder_dec):
    assert " ".join(to_linear(reminder_dec)) == REMINDER_DECOUPLED


def test_minimal_tree():
    assert to_linear(SemanticTree(intent("X", slot("Y", "a")))) == ["[IN:X", "[SL:Y", "a", "]", "]"]


def test_from_linear_reminder_dec(reminder_dec):
    assert from_linear(REMINDER_DECOUPLED) == reminder_dec


def test_weather_second_round_trip(weather_turns):
    s = linear_string(weather_turns[1])
    assert s == "[IN:GET_TRAFFIC [SL:LOCATION [REF:EXPLICIT San Francisco ; there ] ] ]"
    assert from_linear(s) == weather_turns[1]


@pytest.mark.parametrize(
    "seq,err",
    [
        ("[IN:X ]", EmptyNode),
        ("[IN:X [SL:Y a ]", UnbalancedBrackets),
        ("[IN:X [SL:Y a ] ] ]", TrailingTokens),
        ("[IN:X [SL:Y a ] ] b", TrailingTokens),
        ("a [IN:X [SL:Y a ] ]", TokenOutsideNode),
        ("", EmptyNode),
        ("[XX:Y a ]", MalformedSymbol),
        ("[IN:X [SL:Y a ; b ] ]", MalformedSymbol),
        ("[IN:X [SL:Y [REF:EXPLICIT a ; ] ] ]", EmptyNode),
    ],
)
def test_from_linear_errors(seq, err):
    with pytest.raises(err) as info:
        from_linear(seq)
    assert info.value.position is not None


def test_from_linear_leaf_intent_flag():
    assert from_linear("[IN:X ]", allow_leaf_intent=True).root.children == ()


def test_to_linear_rejects_invalid_tree():
    with pytest.raises(InvalidTree):
        to_linear(SemanticTree(intent("X", "a", slot("Y", "b"))))


def test_round_trip_random_decoupled():
    rng = random.Random(1)
    for _ in range(1000):
        t = random_decoupled_tree(rng)
        assert from_linear(to_linear(t)) == t


def test_round_trip_random_compositional():
    rng = random.Random(2)
    for _ in range(300):
        t = random_compositional_tree(rng)
        assert from_linear(to_linear(t), form=Form.COMPOSITIONAL) == t


def test_symbols_and_tokens_disjoint():
    rng = random.Random(4)
    for _ in range(200):
        t = random_decoupled_tree(rng)
        seq = to_linear(t)
        syms = [x for x in seq if x.startswith("[") or x in ("]", ";")]
        words = [x for x in seq if x not in syms]
        assert not set(syms) & set(words)
        assert len(syms) + len(words) == len(seq)


def test_collapse_refs(weather_turns):
    c = canonicalize(weather_turns[1], CanonPolicy(collapse_ref_kinds=True))
    ref_node = c.root.children[0].children[0]
    assert ref_node.kind is Kind.REF
    assert [n.token for n in ref_node.children] == ["San", "Francisco"]


def test_all_false_policy_is_identity(reminder_dec, weather_turns):
    for t in (reminder_dec, *weather_turns):
        assert canonicalize(t, CanonPolicy()) == t


def test_strip_root():
    a = SemanticTree(intent("A", slot("S", "x")))
    b = SemanticTree(intent("B", slot("S", "x")))
    p = CanonPolicy(strip_root_intent=True)
    assert canonical_string(a, p) == canonical_string(b, p) == "[IN:__ROOT__ [SL:S x ] ]"


def test_sorted_slots_make_permutations_equal():
    rng = random.Random(9)
    p = CanonPolicy(sort_sibling_slots=True)
    for _ in range(200):
        t = random_decoupled_tree(rng)
        kids = list(t.root.children)
        rng.shuffle(kids)
        shuffled = SemanticTree(intent(t.intent, *kids))
        assert canonical_string(t, p) == canonical_string(shuffled, p)


def test_sorting_keeps_token_order():
    t = SemanticTree(intent("A", slot("Z", "b", "a"), slot("B", "y", "x")))
    assert canonical_string(t, CanonPolicy(sort_sibling_slots=True)) == "[IN:A [SL:B y x ] [SL:Z b a ] ]"


policies = st.builds(CanonPolicy, st.booleans(), st.booleans(), st.booleans())


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 10**6), policy=policies)
def test_canonicalize_idempotent(seed, policy):
    t = random_decoupled_tree(random.Random(seed))
    once = canonicalize(t, policy)
    assert canonicalize(once, policy) == once


def test_compositional_leaves_survive_round_trip():
    rng = random.Random(7)
    t = random_compositional_tree(rng)
    back = from_linear(linear_string(t), form=Form.COMPOSITIONAL)
    assert leaves(back) == leaves(t)
