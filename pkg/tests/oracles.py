"""Brute-force reference implementations of the evaluation metrics.

These deliberately avoid the package's canonicalizer: trees are turned into
nested tuples and compared directly.
"""

from dsp.linearize import from_linear, linear_tokens
from dsp.synth import SynthGrammar, generate_synthetic, random_decoupled_tree
from dsp.tree import LabelNode, TokenNode, validate


def parse(pred, strict=True):
    if pred is None:
        return None
    if not isinstance(pred, (list, tuple, str)):
        return pred
    try:
        tree = from_linear(pred, allow_leaf_intent=True)
    except ValueError:
        return None
    if strict and not validate(tree, allow_leaf_intent=True).ok:
        return None
    return tree


def canon(node, collapse=False, strip=False, sort=False, root=True):
    if isinstance(node, TokenNode):
        return node.token
    kind, name = node.label.kind.value, node.label.name
    kids = node.children
    if kind == "REF" and collapse:
        name = "ANY"
        out = []
        for c in kids:
            if c.token == ";":
                break
            out.append(c.token)
        return (kind, name, tuple(out))
    if root and strip:
        name = "__ROOT__"
    items = [canon(c, collapse, strip, sort, False) for c in kids]
    if sort and kind == "IN":
        slot_pos = [i for i, c in enumerate(kids) if isinstance(c, LabelNode) and c.label.kind.value == "SL"]
        ordered = sorted((items[i] for i in slot_pos), key=repr)
        for i, v in zip(slot_pos, ordered):
            items[i] = v
    return (kind, name, tuple(items))


def same(pred, gold, **policy):
    tree = parse(pred)
    return tree is not None and canon(tree.root, **policy) == canon(gold.root, **policy)


def fa(preds, golds, **policy):
    hits = 0
    for p, g in zip(preds, golds):
        hits += same(p, g, **policy)
    return hits / len(golds)


def ref_fa(preds, golds, **policy):
    return fa(preds, golds, **{**policy, "collapse": True})


def inner(preds, golds, **policy):
    return fa(preds, golds, **{**policy, "strip": True})


def intent_acc(preds, golds):
    hits = 0
    for p, g in zip(preds, golds):
        tree = parse(p)
        hits += tree is not None and tree.root.label.name == g.root.label.name
    return hits / len(golds)


def oracle_k(beams, golds, k, **policy):
    hits = 0
    for beam, g in zip(beams, golds):
        hits += any(same(h, g, **policy) for h in beam[:k])
    return hits / len(golds)


def _pairs(tree):
    out = set()
    if tree is None:
        return out
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if isinstance(node, TokenNode):
            continue
        if node.label.kind.value == "SL":
            out.add((node.label.name, tuple(_value(node))))
        stack.extend(node.children)
    return out


def _value(node):
    toks = []
    for c in node.children:
        if isinstance(c, TokenNode):
            toks.append(c.token.lower())
        elif c.label.kind.value == "REF":
            for t in c.children:
                if t.token == ";":
                    break
                toks.append(t.token.lower())
        else:
            toks.extend(_value(c))
    return toks


def carryover(pred_sessions, gold_sessions):
    """Per-bucket (correct, total) by a quadratic scan over earlier turns."""
    buckets = {"0": [0, 0], "1": [0, 0], "2": [0, 0], ">=3": [0, 0]}
    for preds, golds in zip(pred_sessions, gold_sessions):
        gold_pairs = [_pairs(g) for g in golds]
        for t, g in enumerate(golds):
            pred_pairs = _pairs(parse(preds[t], strict=False))
            for node in _slot_nodes(g.root):
                key = (node.label.name, tuple(_value(node)))
                first = next(s for s in range(t + 1) if key in gold_pairs[s])
                d = t - first
                b = buckets[str(d) if d < 3 else ">=3"]
                b[1] += 1
                b[0] += key in pred_pairs
    return {k: tuple(v) for k, v in buckets.items()}


def _slot_nodes(node):
    if isinstance(node, TokenNode):
        return []
    out = [node] if node.label.kind.value == "SL" else []
    for c in node.children:
        out.extend(_slot_nodes(c))
    return out


# random prediction corpora


def perturb(rng, gold):
    """A prediction derived from ``gold``: identical, semantically altered, or malformed."""
    seq = linear_tokens(gold)
    op = rng.randrange(9)
    if op == 0:
        return list(seq)
    if op == 1:  # different root intent
        return [f"[IN:{rng.choice(['A', 'B', gold.intent])}"] + seq[1:]
    if op == 2:  # flip a reference kind
        out = list(seq)
        for i, tok in enumerate(out):
            if tok == "[REF:EXPLICIT":
                out[i] = "[REF:IMPLICIT"
                if ";" in out[i:]:
                    j = out.index(";", i)
                    k = out.index("]", j)
                    del out[j:k]
                return out
            if tok == "[REF:IMPLICIT":
                out[i] = "[REF:EXPLICIT"
                k = out.index("]", i)
                out[k:k] = [";", "it"]
                return out
        return out
    if op == 3:  # reorder top-level slots
        kids = list(gold.root.children)
        rng.shuffle(kids)
        return linear_tokens(type(gold)(LabelNode(gold.root.label, tuple(kids)), gold.form))
    if op == 4:  # drop one position (often malformed)
        out = list(seq)
        del out[rng.randrange(len(out))]
        return out
    if op == 5:  # replace a word
        out = list(seq)
        words = [i for i, t in enumerate(out) if not t.startswith("[") and t not in ("]", ";")]
        if words:
            out[rng.choice(words)] = "zzz"
        return out
    if op == 6:  # token directly under the root intent (invalid)
        return seq[:1] + ["stray"] + seq[1:]
    if op == 7:
        return None
    return linear_tokens(random_decoupled_tree(rng))


def gold_pool(seed, n=400):
    sessions = generate_synthetic(SynthGrammar(seed=seed, max_turns=6), n)
    return [t for s in sessions for t in s.gold_trees()]


def random_corpus(rng, pool, n=None):
    n = n or rng.randint(1, 30)
    golds = [rng.choice(pool) for _ in range(n)]
    preds = [perturb(rng, g) for g in golds]
    return preds, golds


def random_beams(rng, golds, width=5):
    beams = []
    for g in golds:
        beam = [perturb(rng, g) for _ in range(width)]
        if rng.random() < 0.5:
            beam[rng.randrange(width)] = linear_tokens(g)
        beams.append(beam)
    return beams


def drop_carried(golds):
    """Predictions equal to gold minus every slot carried from an earlier turn.

    Returns the predictions and, per session, the number of fresh slots that
    dominate a deleted slot (their value necessarily changes).
    """
    preds, damaged = [], 0
    gold_pairs = [_pairs(g) for g in golds]
    for t, g in enumerate(golds):
        carried = set().union(*gold_pairs[:t]) if t else set()

        def strip(node):
            nonlocal damaged
            kids, lost = [], False
            for c in node.children:
                if isinstance(c, LabelNode) and c.label.kind.value == "SL" and (c.label.name, tuple(_value(c))) in carried:
                    lost = True
                    continue
                if isinstance(c, LabelNode):
                    c, sub_lost = strip(c)
                    lost = lost or sub_lost
                kids.append(c)
            if lost and node.label.kind.value == "SL":
                damaged += 1
            return LabelNode(node.label, tuple(kids)), lost

        root, _ = strip(g.root)
        preds.append(type(g)(root, g.form))
    return preds, damaged
