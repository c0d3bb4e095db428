"""Beam search over the extended (ontology + copy) distribution.

With ``constrain=True`` every step is masked by a small pushdown state so
that each finished hypothesis is a well-formed decoupled tree: balanced
brackets, no empty nodes, slots holding tokens or a single intent/ref,
``;`` only inside explicit refs, depth at most ``max_depth``, and enough
room left in the length budget to close every open bracket.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import torch

from dsp.linearize import CLOSE
from dsp.nn.model import PointerGeneratorParser
from dsp.nn.vocab import EOS, PAD
from dsp.session import SEP
from dsp.tree import SEPARATOR

MAX_DEPTH = 10

OPEN_IN, OPEN_SL, OPEN_REFE, OPEN_REFI = "open_in", "open_sl", "open_refe", "open_refi"
CLOSE_CLS, SEMI, EOS_CLS, WORD = "close", "semi", "eos", "word"


def max_decode_len(source_len: int) -> int:
    return 2 * source_len + 32


def symbol_class(symbol: str) -> str:
    if symbol == EOS:
        return EOS_CLS
    if symbol == CLOSE:
        return CLOSE_CLS
    if symbol == SEPARATOR:
        return SEMI
    if symbol.startswith("[IN:"):
        return OPEN_IN
    if symbol.startswith("[SL:"):
        return OPEN_SL
    if symbol == "[REF:EXPLICIT":
        return OPEN_REFE
    if symbol == "[REF:IMPLICIT":
        return OPEN_REFI
    raise ValueError(f"unknown symbol class for {symbol!r}")


@dataclass(frozen=True)
class BracketState:
    """Pushdown state of a partial linearization.

    ``stack`` frames are ``(kind, status)`` with kind in IN/SL/REFE/REFI.
    IN status counts slots; SL status is empty/tokens/nested; REF status is
    empty/ante/semi/trig.
    """

    stack: tuple = ()
    done: bool = False

    @property
    def depth(self) -> int:
        return len(self.stack)

    def cost(self, allow_leaf_intent: bool = False) -> int:
        """Fewest tokens (EOS included) needed to finish from here."""
        if self.done:
            return 1
        if not self.stack:
            return 3 if allow_leaf_intent else 6
        kind, status = self.stack[-1]
        if kind == "IN":
            extra = 0 if status or allow_leaf_intent else 3
        elif kind == "SL":
            extra = 1 if status == "empty" else 0
        else:
            extra = 1 if status in ("empty", "semi") else 0
        return len(self.stack) + extra + 1

    def apply(self, cls: str) -> "BracketState":
        stack = list(self.stack)
        if cls == EOS_CLS:
            return self
        if cls in (OPEN_IN, OPEN_SL, OPEN_REFE, OPEN_REFI):
            if stack:
                kind, status = stack[-1]
                if kind == "SL":
                    stack[-1] = (kind, "nested")
            kind = {OPEN_IN: "IN", OPEN_SL: "SL", OPEN_REFE: "REFE", OPEN_REFI: "REFI"}[cls]
            stack.append((kind, 0 if kind == "IN" else "empty"))
            return BracketState(tuple(stack), False)
        if cls == CLOSE_CLS:
            stack.pop()
            if not stack:
                return BracketState((), True)
            kind, status = stack[-1]
            if kind == "IN":
                stack[-1] = (kind, status + 1)
            return BracketState(tuple(stack), False)
        if cls == SEMI:
            stack[-1] = (stack[-1][0], "semi")
            return BracketState(tuple(stack), False)
        # word
        kind, status = stack[-1]
        if kind == "SL":
            stack[-1] = (kind, "tokens")
        elif status in ("empty", "ante"):
            stack[-1] = (kind, "ante")
        else:
            stack[-1] = (kind, "trig")
        return BracketState(tuple(stack), False)

    def allowed(self, remaining: int, max_depth: int = MAX_DEPTH,
                allow_leaf_intent: bool = False) -> frozenset:
        return _allowed(self, remaining, max_depth, allow_leaf_intent)


@lru_cache(maxsize=65536)
def _allowed(state: BracketState, remaining: int, max_depth: int, allow_leaf_intent: bool) -> frozenset:
    if state.done:
        return frozenset({EOS_CLS})
    if not state.stack:
        cands = {OPEN_IN}
    else:
        kind, status = state.stack[-1]
        can_open = state.depth < max_depth
        cands = set()
        if kind == "IN":
            if can_open:
                cands.add(OPEN_SL)
            if status or allow_leaf_intent:
                cands.add(CLOSE_CLS)
        elif kind == "SL":
            if status == "empty":
                cands.add(WORD)
                if can_open:
                    cands.update({OPEN_IN, OPEN_REFE, OPEN_REFI})
            elif status == "tokens":
                cands.update({WORD, CLOSE_CLS})
            else:
                cands.add(CLOSE_CLS)
        else:
            if status in ("empty", "semi"):
                cands.add(WORD)
            elif status == "ante":
                cands.update({WORD, CLOSE_CLS})
                if kind == "REFE":
                    cands.add(SEMI)
            else:
                cands.update({WORD, CLOSE_CLS})
    return frozenset(c for c in cands if state.apply(c).cost(allow_leaf_intent) <= remaining - 1)


@dataclass
class BeamHypothesis:
    tokens: list
    logprob: float
    open_brackets: int
    finished: bool = True
    state: Optional[object] = field(default=None, repr=False)


def _open_count(tokens) -> int:
    n = 0
    for t in tokens:
        if t.startswith("[") and len(t) > 1:
            n += 1
        elif t == CLOSE:
            n -= 1
    return n


@torch.no_grad()
def beam_search_batch(
    model: PointerGeneratorParser,
    sources: Sequence[Sequence[str]],
    k: int = 1,
    constrain: bool = True,
    max_depth: int = MAX_DEPTH,
    allow_leaf_intent: bool = False,
) -> list[list[BeamHypothesis]]:
    """Top-k hypotheses for each source, sorted by descending log-probability."""
    if k < 1:
        raise ValueError("k must be >= 1")
    was_training = model.training
    model.eval()
    try:
        return _search(model, [list(s) for s in sources], k, constrain, max_depth, allow_leaf_intent)
    finally:
        model.train(was_training)


def beam_search(model, source, k=1, constrain=True, **kw) -> list[BeamHypothesis]:
    return beam_search_batch(model, [source], k, constrain, **kw)[0]


def _search(model, sources, k, constrain, max_depth, allow_leaf_intent):
    vocab = model.vocab
    V = vocab.n_symbols
    B = len(sources)
    R = B * k
    neg_inf = float("-inf")

    # unique copyable tokens per example and their source positions
    skip = {SEP, PAD} if constrain else set()
    words, groups = [], []
    T = max(len(s) for s in sources)
    for src in sources:
        uniq = []
        for tok in src:
            if tok not in skip and tok not in uniq and not vocab.is_symbol(tok):
                uniq.append(tok)
        words.append(uniq)
    U = max(1, max(len(w) for w in words))
    G = torch.zeros((B, U, T), dtype=torch.bool)
    for b, (src, uniq) in enumerate(zip(sources, words)):
        index = {t: u for u, t in enumerate(uniq)}
        for i, tok in enumerate(src):
            if tok in index:
                G[b, index[tok], i] = True
    word_valid = G.any(-1)  # [B, U]

    classes = [symbol_class(s) for s in vocab.symbols]
    class_masks: dict = {}

    def mask_for(allowed: frozenset):
        if allowed not in class_masks:
            m = torch.full((V + U,), neg_inf)
            for j, c in enumerate(classes):
                if c in allowed:
                    m[j] = 0.0
            if WORD in allowed:
                m[V:] = 0.0
            class_masks[allowed] = m
        return class_masks[allowed]

    ids, lengths = model.source_ids(sources)
    row_ex = torch.arange(B).repeat_interleave(k)
    enc = model.encode(ids, lengths).index_select(row_ex)
    G_rows = G.index_select(0, row_ex)
    word_valid_rows = word_valid.index_select(0, row_ex)
    max_lens = [max_decode_len(len(s)) for s in sources]

    prev = model.bos_input(enc)
    omega = model.initial_omega(enc)
    state = enc.init
    scores = torch.full((R,), neg_inf)
    scores[torch.arange(B) * k] = 0.0
    hyps: list[list[str]] = [[] for _ in range(R)]
    bstates = [BracketState() for _ in range(R)]
    finished: list[list[BeamHypothesis]] = [[] for _ in range(B)]
    done = [False] * B

    step_i = 0
    while not all(done):
        step = model.decode_step(enc, prev, omega, state)
        log_word = torch.logsumexp(
            step.log_pc.unsqueeze(1).masked_fill(~G_rows, neg_inf), dim=-1
        ).masked_fill(~word_valid_rows, neg_inf)
        cand = torch.cat(
            [step.log_alpha.unsqueeze(1) + step.log_pg, step.log_one_minus_alpha.unsqueeze(1) + log_word],
            dim=1,
        )
        if constrain:
            rows = []
            for r in range(R):
                b = r // k
                if done[b] or scores[r] == neg_inf:
                    rows.append(torch.full((V + U,), neg_inf))
                else:
                    remaining = max_lens[b] - step_i
                    rows.append(mask_for(bstates[r].allowed(remaining, max_depth, allow_leaf_intent)))
            cand = cand + torch.stack(rows)
        total = (scores.unsqueeze(1) + cand).view(B, k * (V + U))

        new_rows, new_scores, new_tokens, new_bstates, choice = [], [], [], [], []
        for b in range(B):
            live: list = []
            if not done[b]:
                top_vals, top_idx = total[b].topk(min(2 * k, total.shape[1]))
                last_step = step_i + 1 >= max_lens[b]
                for val, idx in zip(top_vals.tolist(), top_idx.tolist()):
                    if val == neg_inf or len(live) == k:
                        break
                    r = b * k + idx // (V + U)
                    c = idx % (V + U)
                    tok = vocab.symbols[c] if c < V else words[b][c - V]
                    if c == vocab.eos_id:
                        finished[b].append(BeamHypothesis(list(hyps[r]), val, _open_count(hyps[r])))
                        continue
                    new_toks = hyps[r] + [tok]
                    if last_step:
                        # out of budget: keep as an unfinished best-effort hypothesis
                        finished[b].append(BeamHypothesis(new_toks, val, _open_count(new_toks), finished=False))
                        continue
                    cls = classes[c] if c < V else WORD
                    live.append((r, val, new_toks, bstates[r].apply(cls) if constrain else bstates[r], c))
                fin = sorted(h.logprob for h in finished[b] if h.finished)
                best_live = live[0][1] if live else neg_inf
                if not live or (len(fin) >= k and best_live <= fin[-k]) or last_step:
                    done[b] = True
                    live = []
            # pad to k rows; padding rows are dead (score -inf)
            while len(live) < k:
                live.append((b * k, neg_inf, [], BracketState(), vocab.eos_id))
            for r, val, toks, bs, c in live:
                new_rows.append(r)
                new_scores.append(val)
                new_tokens.append(toks)
                new_bstates.append(bs)
                choice.append(c)
        step_i += 1
        if all(done):
            break
        idx = torch.tensor(new_rows)
        scores = torch.tensor(new_scores, dtype=scores.dtype)
        hyps, bstates = new_tokens, new_bstates
        state = tuple(s.index_select(1, idx) for s in step.state)
        omega = step.omega.index_select(0, idx)
        choice_t = torch.tensor(choice)
        is_sym = choice_t < V
        sym_in = model.symbol_input(choice_t.clamp(max=V - 1))
        word_idx = (choice_t - V).clamp(min=0)
        positions = G_rows[torch.arange(R), word_idx]
        copy_in = model.copy_input(enc, positions)
        prev = torch.where(is_sym.unsqueeze(-1), sym_in, copy_in)

    out = []
    for b in range(B):
        ranked = sorted(finished[b], key=lambda h: (not h.finished, -h.logprob))
        out.append(ranked[:k])
    return out


def greedy_decode(model, sources, constrain=True, batch_size=64, **kw) -> list[list[str]]:
    """Best constrained hypothesis per source (token lists)."""
    preds = []
    for i in range(0, len(sources), batch_size):
        for beam in beam_search_batch(model, sources[i : i + batch_size], 1, constrain, **kw):
            preds.append(beam[0].tokens if beam else [])
    return preds
