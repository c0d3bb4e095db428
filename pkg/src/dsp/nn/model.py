"""Pointer-generator sequence-to-sequence parser.

Shapes (B batch, T source length, N target length, E embedding size,
H hidden size, L layers, A heads, V ontology size)::

    word_emb     [Vw, E]          source word embeddings
    encoder      biLSTM E -> 2H, L layers
    bridge       2H -> 2*L*H      initial decoder (h, c) from final encoder states
    sym_emb      [V + 1, E]       decoder input embedding of ontology symbols (+ <bos>)
    copy_in      2H -> E          decoder input for a copied token (mean of its encoder states)
    decoder      LSTM E + 2H -> H, L layers   (input feeding of the previous context)
    gen          H -> V           Linear_g
    copy_query   H -> 2H          Linear_c
    attn_k/v/o   2H -> 2H         multi-head attention projections, A heads of 2H/A (no key bias)
    gate         H + 2H -> 1      Linear_alpha
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from dsp.nn.vocab import EOS, PAD, UNK, Vocabulary


NEG_FILL = -1e9


class ShapeMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class OverMaxLen(ValueError):
    pass


@dataclass
class ModelConfig:
    emb_dim: int = 64
    hidden: int = 128
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    max_len: int = 512

    def __post_init__(self):
        if (2 * self.hidden) % self.heads:
            raise ValueError("2 * hidden must be divisible by heads")


@dataclass
class Encoded:
    states: torch.Tensor  # [B, T, 2H]
    mask: torch.Tensor  # [B, T] True at real positions
    keys: torch.Tensor  # [B, A, T, 2H/A]
    values: torch.Tensor  # [B, A, T, 2H/A]
    init: tuple  # decoder (h0, c0), each [L, B, H]

    def index_select(self, idx: torch.Tensor) -> "Encoded":
        return Encoded(
            self.states.index_select(0, idx),
            self.mask.index_select(0, idx),
            self.keys.index_select(0, idx),
            self.values.index_select(0, idx),
            tuple(s.index_select(1, idx) for s in self.init),
        )


@dataclass
class DecoderStep:
    """One decoding step. Distributions are kept in log space; the
    probability views below are derived from them."""

    x: torch.Tensor  # [B, H]
    log_pg: torch.Tensor  # [B, V]
    log_pc: torch.Tensor  # [B, T], ~-1e9 at padding
    omega: torch.Tensor  # [B, 2H]
    gate_logit: torch.Tensor  # [B]
    state: tuple

    @property
    def p_g(self):
        return self.log_pg.exp()

    @property
    def p_c(self):
        return self.log_pc.exp()

    @property
    def p_alpha(self):
        return torch.sigmoid(self.gate_logit)

    @property
    def log_alpha(self):
        return F.logsigmoid(self.gate_logit)

    @property
    def log_one_minus_alpha(self):
        return F.logsigmoid(-self.gate_logit)

    @property
    def p_t(self):
        """Extended distribution: ontology entries first, then source positions."""
        a = self.p_alpha.unsqueeze(-1)
        return torch.cat([a * self.p_g, (1 - a) * self.p_c], dim=-1)


class PointerGeneratorParser(nn.Module):
    def __init__(self, vocab: Vocabulary, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.vocab = vocab
        self.config = config
        E, H, L, A = config.emb_dim, config.hidden, config.layers, config.heads
        self.word_emb = nn.Embedding(len(vocab.words), E, padding_idx=vocab.word2id[PAD])
        self.encoder = nn.LSTM(E, H, L, batch_first=True, bidirectional=True)
        self.bridge = nn.Linear(2 * H, 2 * L * H)
        self.sym_emb = nn.Embedding(vocab.n_symbols + 1, E)
        self.copy_in = nn.Linear(2 * H, E)
        self.decoder = nn.LSTM(E + 2 * H, H, L)
        self.gen = nn.Linear(H, vocab.n_symbols)
        self.copy_query = nn.Linear(H, 2 * H)
        # a key bias shifts every score of a head equally, so softmax ignores it
        self.attn_k = nn.Linear(2 * H, 2 * H, bias=False)
        self.attn_v = nn.Linear(2 * H, 2 * H)
        self.attn_o = nn.Linear(2 * H, 2 * H)
        self.gate = nn.Linear(3 * H, 1)
        self.drop = nn.Dropout(config.dropout)

    # ------------------------------------------------------------------ encoding

    def source_ids(self, sources: Sequence[Sequence[str]], word_dropout: float = 0.0,
                   generator: Optional[torch.Generator] = None):
        lengths = [len(s) for s in sources]
        if min(lengths) == 0:
            raise EmptyInput("empty source sequence")
        if max(lengths) > self.config.max_len:
            raise OverMaxLen(f"source of length {max(lengths)} exceeds {self.config.max_len}")
        T = max(lengths)
        ids = torch.full((len(sources), T), self.vocab.word2id[PAD], dtype=torch.long)
        for b, src in enumerate(sources):
            ids[b, : len(src)] = torch.tensor([self.vocab.word_id(t) for t in src])
        if word_dropout > 0:
            droppable = ids >= 3  # not pad/unk/sep
            hit = torch.rand(ids.shape, generator=generator) < word_dropout
            ids = ids.masked_fill(droppable & hit, self.vocab.word2id[UNK])
        return ids, torch.tensor(lengths)

    def encode(self, ids: torch.Tensor, lengths: torch.Tensor) -> Encoded:
        B, T = ids.shape
        H, L, A = self.config.hidden, self.config.layers, self.config.heads
        emb = self.drop(self.word_emb(ids))
        packed = pack_padded_sequence(emb, lengths, batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.encoder(packed)
        states, _ = pad_packed_sequence(out, batch_first=True, total_length=T)
        states = self.drop(states)
        final = torch.cat([h_n[-2], h_n[-1]], dim=-1)  # last layer, fwd and bwd
        init = torch.tanh(self.bridge(final)).view(B, 2, L, H).permute(1, 2, 0, 3)
        mask = torch.arange(T).unsqueeze(0) < lengths.unsqueeze(1)
        dh = 2 * H // A
        keys = self.attn_k(states).view(B, T, A, dh).transpose(1, 2)
        values = self.attn_v(states).view(B, T, A, dh).transpose(1, 2)
        return Encoded(states, mask, keys, values, (init[0].contiguous(), init[1].contiguous()))

    def encode_tokens(self, tokens: Sequence[str]) -> torch.Tensor:
        """Encoder states ``e_1..e_T`` for a single source, shape [T, 2H]."""
        ids, lengths = self.source_ids([tokens])
        return self.encode(ids, lengths).states[0]

    # ------------------------------------------------------------------ decoding

    def initial_omega(self, enc: Encoded) -> torch.Tensor:
        return enc.states.new_zeros(enc.states.shape[0], 2 * self.config.hidden)

    def bos_input(self, enc: Encoded) -> torch.Tensor:
        ids = torch.full((enc.states.shape[0],), self.vocab.bos_id, dtype=torch.long)
        return self.sym_emb(ids)

    def symbol_input(self, ids: torch.Tensor) -> torch.Tensor:
        return self.sym_emb(ids)

    def copy_input(self, enc: Encoded, positions: torch.Tensor) -> torch.Tensor:
        """Input embedding of a copied token: mean encoder state over ``positions`` [B, T]."""
        w = positions.to(enc.states.dtype)
        w = w / w.sum(-1, keepdim=True).clamp_min(1.0)
        return self.copy_in(torch.einsum("bt,btd->bd", w, enc.states))

    def decode_step(self, enc: Encoded, prev_input: torch.Tensor, prev_omega: torch.Tensor,
                    state: tuple) -> DecoderStep:
        B, T = enc.mask.shape
        H, A = self.config.hidden, self.config.heads
        if prev_input.shape != (B, self.config.emb_dim) or prev_omega.shape != (B, 2 * H):
            raise ShapeMismatch(
                f"decoder inputs {tuple(prev_input.shape)}/{tuple(prev_omega.shape)} for batch {B}"
            )
        inp = torch.cat([self.drop(prev_input), prev_omega], dim=-1).unsqueeze(0)
        out, state = self.decoder(inp, state)
        x = self.drop(out[0])
        log_pg = F.log_softmax(self.gen(x), dim=-1)

        dh = 2 * H // A
        q = self.copy_query(x).view(B, A, 1, dh)
        scores = (q @ enc.keys.transpose(-1, -2)).squeeze(2) / math.sqrt(dh)  # [B, A, T]
        # finite fill keeps the backward pass of logsumexp NaN-free at padding
        scores = scores.masked_fill(~enc.mask.unsqueeze(1), NEG_FILL)
        log_attn = F.log_softmax(scores, dim=-1)
        # p_c is the head average of the attention distributions
        log_pc = torch.logsumexp(log_attn, dim=1) - math.log(A)
        context = (log_attn.exp().unsqueeze(2) @ enc.values).squeeze(2)  # [B, A, dh]
        omega = self.attn_o(context.reshape(B, 2 * H))
        gate_logit = self.gate(torch.cat([x, omega], dim=-1)).squeeze(-1)
        return DecoderStep(x, log_pg, log_pc, omega, gate_logit, state)

    # ------------------------------------------------------------------- training

    def prepare_targets(self, sources, targets):
        """Tensorize targets (EOS appended).

        Returns ``sym`` [B, N] (ontology id or -1 for copies/padding),
        ``copy`` [B, N, T] (source positions holding the target token) and
        ``mask`` [B, N].
        """
        B = len(sources)
        T = max(len(s) for s in sources)
        full = [list(t) + [EOS] for t in targets]
        N = max(len(t) for t in full)
        sym = torch.full((B, N), -1, dtype=torch.long)
        copy = torch.zeros((B, N, T), dtype=torch.bool)
        mask = torch.zeros((B, N), dtype=torch.bool)
        for b, (src, tgt) in enumerate(zip(sources, full)):
            self.vocab.check_target(src, tgt[:-1])
            positions: dict = {}
            for i, tok in enumerate(src):
                positions.setdefault(tok, []).append(i)
            for n, tok in enumerate(tgt):
                mask[b, n] = True
                if self.vocab.is_symbol(tok):
                    sym[b, n] = self.vocab.sym2id[tok]
                else:
                    copy[b, n, positions[tok]] = True
        return sym, copy, mask

    def forward(self, sources, targets, word_dropout: float = 0.0,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Per-example negative log-likelihood under teacher forcing, shape [B]."""
        ids, lengths = self.source_ids(sources, word_dropout, generator)
        sym, copy, mask = self.prepare_targets(sources, targets)
        enc = self.encode(ids, lengths)
        N = sym.shape[1]
        prev = self.bos_input(enc)
        omega = self.initial_omega(enc)
        state = enc.init
        nll = enc.states.new_zeros(len(sources))
        first = torch.zeros_like(enc.mask)
        first[:, 0] = True
        for n in range(N):
            step = self.decode_step(enc, prev, omega, state)
            is_sym = sym[:, n] >= 0
            gen_lp = step.log_alpha + step.log_pg.gather(1, sym[:, n].clamp_min(0).unsqueeze(1)).squeeze(1)
            # rows without copy targets select position 0 so logsumexp stays finite
            sel = copy[:, n] | (~copy[:, n].any(-1, keepdim=True) & first)
            copy_lp = step.log_one_minus_alpha + torch.logsumexp(
                step.log_pc.masked_fill(~sel, float("-inf")), dim=-1
            )
            lp = torch.where(is_sym, gen_lp, copy_lp)
            nll = nll - torch.where(mask[:, n], lp, torch.zeros_like(lp))
            if n + 1 < N:
                sym_in = self.symbol_input(sym[:, n].clamp_min(0))
                copy_in = self.copy_input(enc, copy[:, n])
                prev = torch.where(is_sym.unsqueeze(-1), sym_in, copy_in)
                omega, state = step.omega, step.state
        return nll

    def sequence_nll(self, source: Sequence[str], target: Sequence[str]) -> torch.Tensor:
        """Scalar loss ``-sum_t log p_t(y_t)`` of one target given its source."""
        return self.forward([list(source)], [list(target)])[0]

    def shape_table(self) -> dict:
        return {name: list(p.shape) for name, p in self.named_parameters()}

