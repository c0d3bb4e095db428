import math
import random

import pytest
import torch

from dsp.linearize import from_linear, linear_tokens
from dsp.nn.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from dsp.nn.decode import BracketState, beam_search, beam_search_batch, greedy_decode, max_decode_len
from dsp.nn.gradcheck import check_function, grad_check
from dsp.nn.model import EmptyInput, ModelConfig, OverMaxLen, PointerGeneratorParser, ShapeMismatch
from dsp.nn.train import TrainConfig, train
from dsp.nn.vocab import EOS, Example, UncopiableToken, Vocabulary, make_examples
from dsp.synth import SynthGrammar, generate_synthetic
from dsp.tree import tokenize

TINY = ModelConfig(emb_dim=8, hidden=8, layers=1, heads=2, dropout=0.0)

REMINDER_SRC = tokenize("Please remind me to call John")
REMINDER_TGT = linear_tokens(from_linear(
    "[IN:CREATE_REMINDER [SL:PERSON_REMINDED me ] [SL:TODO [IN:CREATE_CALL [SL:METHOD call ] [SL:CONTACT John ] ] ] ]"
))


@pytest.fixture(scope="module")
def examples():
    return make_examples(generate_synthetic(SynthGrammar(seed=3, max_turns=3), 40))


@pytest.fixture(scope="module")
def vocab(examples):
    extra = [Example(tuple(REMINDER_SRC), tuple(REMINDER_TGT))]
    return Vocabulary.build(list(examples) + extra)


def random_model(vocab, seed, config=TINY):
    torch.manual_seed(seed)
    return PointerGeneratorParser(vocab, config).eval()


def teacher_forced_steps(model, source, target):
    """Decode steps along ``target`` with the same inputs the loss uses."""
    ids, lengths = model.source_ids([source])
    sym, copy, _ = model.prepare_targets([source], [target])
    enc = model.encode(ids, lengths)
    prev, omega, state = model.bos_input(enc), model.initial_omega(enc), enc.init
    steps = []
    for n in range(sym.shape[1]):
        step = model.decode_step(enc, prev, omega, state)
        steps.append(step)
        if sym[0, n] >= 0:
            prev = model.symbol_input(sym[:, n])
        else:
            prev = model.copy_input(enc, copy[:, n])
        omega, state = step.omega, step.state
    return steps, sym, copy


# distributions


def test_distribution_invariants(examples, vocab):
    rng = random.Random(0)
    for seed in range(100):
        model = random_model(vocab, seed)
        ex = rng.choice(examples)
        steps, _, _ = teacher_forced_steps(model, list(ex.source), list(ex.target))
        for s in steps:
            for p in (s.p_g, s.p_c, s.p_t):
                assert abs(p.sum().item() - 1) < 1e-6
                assert (p >= 0).all()
            a = s.p_alpha
            assert 0 < a.item() < 1
            V = model.vocab.n_symbols
            assert torch.equal(s.p_t[:, :V], a.unsqueeze(-1) * s.p_g)
            assert torch.equal(s.p_t[:, V:], (1 - a).unsqueeze(-1) * s.p_c)


def test_gate_extremes(examples, vocab):
    model = random_model(vocab, 1)
    ex = examples[0]
    steps, _, _ = teacher_forced_steps(model, list(ex.source), list(ex.target))
    V = model.vocab.n_symbols
    s = steps[0]
    s.gate_logit = torch.full_like(s.gate_logit, 1e4)
    assert s.p_t[:, V:].sum().item() == 0.0
    s.gate_logit = torch.full_like(s.gate_logit, -1e4)
    assert s.p_t[:, :V].sum().item() == 0.0
    assert abs(s.p_t[:, V:].sum().item() - 1) < 1e-6


def test_omega_is_projected_context(vocab):
    model = random_model(vocab, 2)
    ids, lengths = model.source_ids([REMINDER_SRC])
    enc = model.encode(ids, lengths)
    s = model.decode_step(enc, model.bos_input(enc), model.initial_omega(enc), enc.init)
    assert s.omega.shape == (1, 2 * TINY.hidden)
    assert s.p_c.shape == (1, len(REMINDER_SRC))


# encoder


def test_encoder_shapes(vocab):
    model = random_model(vocab, 0)
    assert model.encode_tokens(["x"]).shape == (1, 2 * TINY.hidden)
    src = tokenize("Weather in San Francisco <sep> Traffic there")
    states = model.encode_tokens(src)
    assert states.shape == (7, 2 * TINY.hidden) and torch.isfinite(states).all()
    with pytest.raises(EmptyInput):
        model.encode_tokens([])
    with pytest.raises(OverMaxLen):
        model.encode_tokens(["x"] * (TINY.max_len + 1))


def test_encoder_direction_symmetry(vocab):
    # with tied directions, the forward pass over the reversed input is the
    # backward pass over the original
    model = random_model(vocab, 3)
    with torch.no_grad():
        for name, p in model.encoder.named_parameters():
            if name.endswith("_reverse"):
                p.copy_(getattr(model.encoder, name[: -len("_reverse")]))
    src = list(REMINDER_SRC)
    fwd = model.encode_tokens(src)
    rev = model.encode_tokens(src[::-1])
    H = TINY.hidden
    assert torch.allclose(rev[:, :H], fwd.flip(0)[:, H:], atol=1e-6)


def test_decode_step_shape_mismatch(vocab):
    model = random_model(vocab, 0)
    ids, lengths = model.source_ids([REMINDER_SRC])
    enc = model.encode(ids, lengths)
    with pytest.raises(ShapeMismatch):
        model.decode_step(enc, torch.zeros(1, 3), model.initial_omega(enc), enc.init)


# loss


def test_eos_only_loss(vocab):
    model = random_model(vocab, 4)
    loss = model.sequence_nll(REMINDER_SRC, [])
    steps, _, _ = teacher_forced_steps(model, REMINDER_SRC, [])
    s = steps[0]
    want = -(math.log(s.p_alpha.item()) + math.log(s.p_g[0, vocab.eos_id].item()))
    assert loss.item() == pytest.approx(want, rel=1e-5)


def test_duplicate_token_copy_sums_positions(vocab):
    model = random_model(vocab, 5)
    src = ["call", "John", "or", "John"]
    tgt = ["[IN:CREATE_CALL", "[SL:CONTACT", "John", "]", "]"]
    steps, _, _ = teacher_forced_steps(model, src, tgt)
    manual = 0.0
    for s, tok in zip(steps, tgt + [EOS]):
        if vocab.is_symbol(tok):
            manual -= math.log(s.p_t[0, vocab.sym2id[tok]].item())
        else:
            V = vocab.n_symbols
            mass = sum(s.p_t[0, V + i].item() for i, w in enumerate(src) if w == tok)
            manual -= math.log(mass)
    assert model.sequence_nll(src, tgt).item() == pytest.approx(manual, rel=1e-5)


def test_reminder_loss_finite(vocab):
    model = random_model(vocab, 6)
    assert math.isfinite(model.sequence_nll(REMINDER_SRC, REMINDER_TGT).item())


def test_uncopiable(vocab):
    model = random_model(vocab, 6)
    with pytest.raises(UncopiableToken):
        model.sequence_nll(["call"], ["[IN:CREATE_CALL", "[SL:CONTACT", "John", "]", "]"])


def test_batched_loss_matches_single(examples, vocab):
    model = random_model(vocab, 7)
    batch = examples[:5]
    nll = model([e.source for e in batch], [e.target for e in batch])
    for e, v in zip(batch, nll):
        assert model.sequence_nll(e.source, e.target).item() == pytest.approx(v.item(), rel=1e-5)


# decoding


def test_bracket_state_basics():
    assert max_decode_len(5) == 42
    s = BracketState()
    assert s.depth == 0


def test_constrained_soundness(examples, vocab):
    rng = random.Random(1)
    model = random_model(vocab, 8)
    sources = [rng.choice(examples).source for _ in range(200)]
    for seq in greedy_decode(model, sources):
        from_linear(seq)
    for hyps in beam_search_batch(model, sources[:20], k=3):
        assert len(hyps) == 3
        for h in hyps:
            assert h.finished
            from_linear(h.tokens)
        lps = [h.logprob for h in hyps]
        assert lps == sorted(lps, reverse=True)


def test_unconstrained_is_best_effort(examples, vocab):
    model = random_model(vocab, 9)
    hyps = beam_search(model, examples[0].source, k=2, constrain=False)
    assert hyps and all(isinstance(h.tokens, list) for h in hyps)


def test_beam_logprob_matches_loss(examples, vocab):
    model = random_model(vocab, 10)
    src = list(examples[1].source)
    (h,) = beam_search(model, src, k=1)
    assert h.logprob == pytest.approx(-model.sequence_nll(src, h.tokens).item(), abs=1e-4)


# training


def test_lr_zero_is_null_update(examples):
    cfg = TrainConfig(emb_dim=8, hidden=8, layers=1, heads=2, dropout=0.0, word_dropout=0.0,
                      lr=0.0, epochs=3, swa=False)
    res = train(examples[:20], cfg)
    losses = [r.train_loss for r in res.history]
    assert losses[0] == pytest.approx(losses[1], rel=1e-6) == pytest.approx(losses[2], rel=1e-6)
    torch.manual_seed(cfg.seed)
    fresh = PointerGeneratorParser(res.model.vocab, cfg.model_config())
    for a, b in zip(fresh.state_dict().values(), res.model.state_dict().values()):
        assert torch.equal(a, b)


def test_training_is_deterministic(examples):
    cfg = TrainConfig(emb_dim=8, hidden=8, layers=1, heads=2, epochs=3)
    h1 = [(r.train_loss, r.lr) for r in train(examples[:30], cfg).history]
    h2 = [(r.train_loss, r.lr) for r in train(examples[:30], cfg).history]
    assert h1 == h2


def test_swa_and_lr_decay(examples):
    cfg = TrainConfig(emb_dim=8, hidden=8, layers=1, heads=2, epochs=8, lr=1e-3)
    res = train(examples[:20], cfg)
    assert res.swa_applied
    assert res.history[1].lr == pytest.approx(1e-3 * 0.98)


def test_lamb_falls_back(examples):
    cfg = TrainConfig(emb_dim=8, hidden=8, layers=1, heads=2, epochs=1, optimizer="lamb")
    with pytest.warns(UserWarning):
        train(examples[:5], cfg)


@pytest.mark.slow
def test_loss_decreases_first_ten_epochs():
    data = make_examples(generate_synthetic(SynthGrammar(seed=3, max_turns=3), 100))[:200]
    res = train(data, TrainConfig(epochs=10, swa=False))
    losses = [r.train_loss for r in res.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


# gradient checks


def test_gradcheck_quadratic():
    x = torch.randn(6, dtype=torch.float64, requires_grad=True)
    A = torch.randn(6, 6, dtype=torch.float64)
    res = check_function(lambda: x @ A @ x + (x ** 2).sum(), {"x": x}, eps=1e-4, coords_per_param=6)
    assert res.max_rel_error < 1e-8


def test_gradcheck_eps_range():
    x = torch.zeros(1, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ValueError):
        check_function(lambda: (x ** 2).sum(), {"x": x}, eps=1e-2)


def test_gradcheck_gate_only(vocab):
    model = random_model(vocab, 11)
    res = grad_check(model, REMINDER_SRC, REMINDER_TGT, groups=["gate"], coords_per_param=8)
    assert set(res.per_group) == {"gate"}
    assert res.passed(1e-4), res.per_group


def test_gradcheck_tiny_full(vocab):
    model = random_model(vocab, 12)
    res = grad_check(model, REMINDER_SRC, REMINDER_TGT, coords_per_param=3)
    assert {"word_emb", "encoder", "decoder", "gen", "copy_query", "gate", "attn_k", "sym_emb"} <= set(res.per_group)
    assert res.passed(1e-4), res.per_group


# checkpoints


def test_checkpoint_round_trip(tmp_path, vocab):
    cfg = TrainConfig(emb_dim=8, hidden=8, layers=1, heads=2, dropout=0.0)
    model = random_model(vocab, 13, cfg.model_config())
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, cfg, epoch=3)
    back, cfg2, header = load_checkpoint(path)
    assert cfg2 == cfg and header["epoch"] == 3
    for (k, a), b in zip(model.state_dict().items(), back.state_dict().values()):
        assert torch.equal(a, b), k
    assert read_header(path)["arrays"]["gen.weight"]["shape"] == [vocab.n_symbols, 8]
    assert back.sequence_nll(REMINDER_SRC, REMINDER_TGT).item() == model.sequence_nll(REMINDER_SRC, REMINDER_TGT).item()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
