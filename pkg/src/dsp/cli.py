"""Command-line interface.

Exit status: 0 success, 1 usage error, 2 data error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

logger = logging.getLogger("dsp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json(path):
    if not path:
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _train_config(args):
    from dsp.nn.train import TrainConfig

    cfg = TrainConfig.from_json(_load_json(args.config)) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for name in ("epochs", "lr", "batch_size"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


# ------------------------------------------------------------------ convert


def cmd_convert(args):
    from dsp.convert import ConversionError, recouple
    from dsp.data import ParseError, ValidationError, _READERS, Format, _lines
    from dsp.linearize import linear_string
    from dsp.session import dumps_session, session_from_json

    src = Path(args.input)
    out = open(args.output, "w", encoding="utf-8", newline="\n") if args.output else sys.stdout
    counts = {"converted": 0, "not_recoverable": 0, "invalid": 0}
    try:
        if args.to == "decoupled":
            fmt = {"compositional": Format.TOP_TSV, "flat": Format.FLAT_TSV, "state": Format.STATE_JSONL,
                   "decoupled": Format.SESSION_JSONL}[args.src]
            reader = _READERS[fmt]
            for no, line in _lines(src, None):
                try:
                    session = reader(no, line, src)
                except (ParseError, ValidationError) as e:
                    counts["invalid"] += 1
                    print(str(e), file=sys.stderr)
                    continue
                out.write(dumps_session(session) + "\n")
                counts["converted"] += 1
        else:
            if args.src != "decoupled":
                raise UsageError("--to compositional requires --from decoupled")
            for no, line in _lines(src, None):
                try:
                    session = session_from_json(json.loads(line))
                except (ValueError, KeyError) as e:
                    counts["invalid"] += 1
                    print(f"{src}:{no}: {e}", file=sys.stderr)
                    continue
                for turn in session.turns:
                    if turn.gold is None:
                        continue
                    try:
                        tree = recouple(turn.gold, turn.tokens)
                    except ConversionError as e:
                        counts["not_recoverable"] += 1
                        logger.info("%s:%d: %s", src, no, e)
                        continue
                    out.write(" ".join(turn.tokens) + "\t" + linear_string(tree) + "\n")
                    counts["converted"] += 1
    finally:
        if out is not sys.stdout:
            out.close()
    print(json.dumps(counts), file=sys.stderr)
    return EXIT_OK if counts["invalid"] == 0 else EXIT_DATA


# ------------------------------------------------------------------ validate


def cmd_validate(args):
    from dsp.data import DatasetError, Format, _READERS, _lines, sniff_format

    bad = total = 0
    for name in args.files:
        path = Path(name)
        try:
            fmt = Format(args.format) if args.format else sniff_format(path)
        except (DatasetError, OSError) as e:
            print(f"{path}: {e}", file=sys.stderr)
            bad += 1
            continue
        reader = _READERS[fmt]
        seen = 0
        for no, line in _lines(path, None):
            seen += 1
            try:
                reader(no, line, path)
            except DatasetError as e:
                bad += 1
                print(str(e), file=sys.stderr)
        total += seen
        if seen == 0:
            print(f"{path}: empty file", file=sys.stderr)
            bad += 1
    print(f"{total - bad}/{total} records valid")
    return EXIT_OK if bad == 0 else EXIT_DATA


# ------------------------------------------------------------------ synth


def cmd_synth(args):
    from dsp.data import dump_sessions
    from dsp.synth import SynthGrammar, generate_synthetic

    overrides = _load_json(args.config)
    known = {f.name for f in fields(SynthGrammar)}
    unknown = set(overrides) - known
    if unknown:
        raise UsageError(f"unknown grammar keys: {sorted(unknown)}")
    for name in ("p_explicit", "p_implicit", "p_nesting", "min_turns", "max_turns", "lexicon_split"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    overrides["seed"] = args.seed if args.seed is not None else overrides.get("seed", 0)
    grammar = SynthGrammar(**overrides)
    sessions = generate_synthetic(grammar, args.n)
    if args.output:
        dump_sessions(sessions, args.output)
    else:
        from dsp.session import dumps_session

        for s in sessions:
            sys.stdout.write(dumps_session(s) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------ train / eval / predict


def _examples(path, include_assistant=True):
    from dsp.data import DatasetSpec, load_dataset, sniff_format
    from dsp.nn.vocab import make_examples

    data = load_dataset(DatasetSpec(sniff_format(path), path))
    return data.sessions, make_examples(data.sessions, include_assistant)


def cmd_train(args):
    from dsp.nn.checkpoint import save_checkpoint
    from dsp.nn.train import train

    if not args.checkpoint:
        raise UsageError("train needs --checkpoint to write the model")
    cfg = _train_config(args)
    _, train_set = _examples(args.train)
    valid_set = _examples(args.valid)[1] if args.valid else None
    result = train(train_set, cfg, valid_set)
    save_checkpoint(args.checkpoint, result.model, cfg, epoch=len(result.history) - 1,
                    extra={"swa_applied": result.swa_applied})
    history = [asdict(r) for r in result.history]
    if args.history:
        Path(args.history).write_text(json.dumps(history, indent=1) + "\n", encoding="utf-8")
    last = result.history[-1]
    print(json.dumps({"epochs": len(history), "train_loss": last.train_loss, "valid_fa": last.valid_fa,
                      "swa_applied": result.swa_applied}))
    return EXIT_OK


def _group(preds, examples, sessions):
    by_id = {s.id: [] for s in sessions}
    for p, ex in zip(preds, examples):
        by_id[ex.session_id].append(p)
    return [by_id[s.id] for s in sessions]


def cmd_eval(args):
    from dsp.linearize import from_linear
    from dsp.metrics import (carryover_report, evaluate_beams, format_beam_table,
                             format_carryover_table)

    sessions, examples = _examples(args.data)
    golds = [from_linear(ex.target, allow_leaf_intent=True) for ex in examples]
    if args.predictions:
        _, pred_examples = _examples(args.predictions)
        if [(e.session_id, e.turn) for e in pred_examples] != [(e.session_id, e.turn) for e in examples]:
            raise UsageError("predictions are not aligned with the gold file")
        beams = [[list(e.target)] for e in pred_examples]
    elif args.checkpoint:
        from dsp.nn.checkpoint import load_checkpoint
        from dsp.nn.decode import beam_search_batch

        model, cfg, _ = load_checkpoint(args.checkpoint)
        k = max(args.beam)
        beams = []
        for i in range(0, len(examples), 64):
            chunk = [ex.source for ex in examples[i : i + 64]]
            for hyps in beam_search_batch(model, chunk, k=k, allow_leaf_intent=cfg.allow_leaf_intent):
                beams.append([h.tokens for h in hyps])
    else:
        raise UsageError("eval needs --checkpoint or --predictions")
    rows = [evaluate_beams(beams, golds, k) for k in sorted(set(args.beam)) if k <= len(beams[0])]
    top1 = [b[0] for b in beams]
    carry_user = carryover_report(_group(top1, examples, sessions), sessions)
    carry_all = carryover_report(_group(top1, examples, sessions), sessions, count_all_turns=True)
    report = {"beams": [r.to_dict() for r in rows], "carryover": carry_user.to_dict(),
              "carryover_all_turns": carry_all.to_dict()}
    if args.json:
        Path(args.json).write_text(json.dumps(report, indent=1) + "\n", encoding="utf-8")
    print(format_beam_table(rows))
    print()
    print(format_carryover_table(carry_user))
    return EXIT_OK


def cmd_predict(args):
    from dsp.linearize import linear_string, from_linear
    from dsp.nn.checkpoint import load_checkpoint
    from dsp.nn.decode import beam_search
    from dsp.session import build_encoder_input, session_from_json
    from dsp.tree import tokenize

    if not args.checkpoint:
        raise UsageError("predict needs --checkpoint")
    model, cfg, _ = load_checkpoint(args.checkpoint)
    status = EXIT_OK
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if line.startswith("{"):
            session = session_from_json(json.loads(line))
            source = list(build_encoder_input(session, session.user_indices[-1]).tokens)
        else:
            source = tokenize(line)
        hyps = beam_search(model, source, k=args.beam, allow_leaf_intent=cfg.allow_leaf_intent)
        for h in hyps[: args.nbest]:
            try:
                text = linear_string(from_linear(h.tokens, allow_leaf_intent=True))
            except ValueError:
                text = " ".join(h.tokens)
                status = EXIT_DATA
            print(text if args.nbest == 1 else f"{h.logprob:.4f}\t{text}")
    return status


# ------------------------------------------------------------------ gradcheck


def cmd_gradcheck(args):
    import torch

    from dsp.nn.gradcheck import grad_check
    from dsp.nn.model import PointerGeneratorParser
    from dsp.nn.vocab import Vocabulary, make_examples
    from dsp.synth import SynthGrammar, generate_synthetic

    cfg = _train_config(args)
    if args.checkpoint:
        from dsp.nn.checkpoint import load_checkpoint

        model, cfg, _ = load_checkpoint(args.checkpoint)
        examples = _examples(args.data)[1] if args.data else None
    else:
        examples = (_examples(args.data)[1] if args.data
                    else make_examples(generate_synthetic(SynthGrammar(seed=cfg.seed), 20)))
        torch.manual_seed(cfg.seed)
        model = PointerGeneratorParser(Vocabulary.build(examples), cfg.model_config())
    if not examples:
        examples = make_examples(generate_synthetic(SynthGrammar(seed=cfg.seed), 20))
    ex = examples[args.index]
    res = grad_check(model, ex.source, ex.target, eps=args.eps, coords_per_param=args.coords,
                     seed=cfg.seed, min_abs_grad=args.min_abs_grad)
    for group, err in sorted(res.per_group.items()):
        print(f"{group:>12}  {err:.3e}")
    ok = res.passed(args.tol)
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_coords} coordinates: "
          f"{'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    return EXIT_OK if ok else EXIT_CHECK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--checkpoint", help="model checkpoint path")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="dsp", description="Decoupled session-based semantic parsing")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", parents=[common], help="convert between tree representations")
    p.add_argument("--from", dest="src", required=True, choices=["compositional", "flat", "state", "decoupled"])
    p.add_argument("--to", required=True, choices=["decoupled", "compositional"])
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("validate", parents=[common], help="validate dataset files")
    p.add_argument("files", nargs="+")
    p.add_argument("--format", choices=["top", "session", "flat", "state"])
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic sessions")
    p.add_argument("-n", type=int, default=100)
    p.add_argument("-o", "--output")
    p.add_argument("--p-explicit", dest="p_explicit", type=float)
    p.add_argument("--p-implicit", dest="p_implicit", type=float)
    p.add_argument("--p-nesting", dest="p_nesting", type=float)
    p.add_argument("--min-turns", dest="min_turns", type=int)
    p.add_argument("--max-turns", dest="max_turns", type=int)
    p.add_argument("--lexicon-split", dest="lexicon_split", choices=["all", "train", "heldout"])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a parser")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--history", help="write per-epoch history JSON here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or prediction file")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", help="session file with predicted parses, aligned with --data")
    p.add_argument("--beam", type=int, nargs="+", default=[1, 5])
    p.add_argument("--json", help="write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="parse utterances or sessions from stdin")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--nbest", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=4)
    p.add_argument("--min-abs-grad", dest="min_abs_grad", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    from dsp.data import DatasetError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"dsp {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, OSError) as e:
        print(f"dsp {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
