"""Command-line entry point: ``dclm <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence
(including a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from dclm import config as cfgmod
from dclm.corpus import (CorpusError, Lexicon, build_vocab, convert_swda_csv, make_windows,
                         read_corpus, split_by_folder, write_corpus)
from dclm.evaluator import (EvalReport, evaluate, relative_change, render_perplexity_table,
                            render_tag_table)
from dclm.models import DialogLM, ModelConfig, Variant, load_embedding_file
from dclm.ngram import ArpaLM, KneserNeyLM, turn_streams
from dclm.params import CheckpointError, load_checkpoint, save_checkpoint
from dclm.synthetic import DEPENDENCIES, generate_synthetic
from dclm.trainer import DivergenceError, TrainConfig, train

log = logging.getLogger("dclm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# model files


def load_model(path):
    """Return ``(scorer, lexicon, metadata)`` for a ``.dclm`` checkpoint or an ARPA file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"DCLM":
        params, meta = load_checkpoint(path)
        if not meta or meta.get("format") != "dclm-model":
            raise DataError(f"{path}: checkpoint carries no model metadata")
        lex = Lexicon.from_json(meta["lexicon"])
        model = DialogLM(meta["variant"], ModelConfig.from_json(meta["model_config"]), params,
                         k=meta["k"])
        return model, lex, meta
    text = path.read_text(encoding="utf-8")
    meta = {}
    for line in text.split("\\data\\", 1)[0].splitlines():
        if line.startswith("# dclm "):
            key, _, value = line[len("# dclm "):].partition(" ")
            meta[key] = json.loads(value)
    if "lexicon" not in meta:
        raise DataError(f"{path}: neither a DCLM checkpoint nor an ARPA file written by dclm")
    lex = Lexicon.from_json(meta["lexicon"])
    lm = ArpaLM.read(text, lex.words.id_to_token)
    lm.cross_turn = bool(meta.get("cross_turn", False))
    meta["variant"] = f"KN{lm.order}"
    return lm, lex, meta


def _read(path) -> list:
    if not Path(path).exists():
        raise DataError(f"corpus file not found: {path}")
    return read_corpus(path)


def _configs(args) -> tuple[dict, dict, dict]:
    values = cfgmod.read_config(args.config) if args.config else {}
    for key in cfgmod.known_keys():
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return cfgmod.split_config(values)


# ---------------------------------------------------------------------------
# commands


def cmd_convert(args) -> int:
    for p in args.swda_csv:
        if not Path(p).exists():
            raise DataError(f"SwDA CSV not found: {p}")
    dialogs = convert_swda_csv(args.swda_csv)
    if args.out:
        write_corpus(args.out, dialogs)
    if args.split_dir:
        _write_splits(dialogs, args.split_dir)
    log.info("converted %d dialogs", len(dialogs))
    return EXIT_OK


def _write_splits(dialogs, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        tr, va, te = split_by_folder(dialogs)
    except ValueError as err:
        raise DataError(str(err)) from None
    for name, part in (("train", tr), ("valid", va), ("test", te)):
        write_corpus(out / f"{name}.jsonl", part)


def cmd_gen_synthetic(args) -> int:
    dialogs = generate_synthetic(args.dialogs, args.vocab_size, args.dependency,
                                 np.random.default_rng(args.seed), turns_per_dialog=args.turns,
                                 min_len=args.min_len, max_len=args.max_len, noise=args.noise)
    if args.out:
        write_corpus(args.out, dialogs)
    if args.split_dir:
        _write_splits(dialogs, args.split_dir)
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    lex = build_vocab(_read(args.corpus), cap=args.cap)
    lex.save(args.out)
    print(lex.fingerprint())
    return EXIT_OK


def cmd_train(args) -> int:
    model_kw, train_kw, extra = _configs(args)
    train_dialogs = _read(args.corpus)
    if args.valid:
        valid_dialogs = _read(args.valid)
    else:
        try:
            train_dialogs, valid_dialogs, _ = split_by_folder(train_dialogs)
        except ValueError as err:
            raise DataError(str(err)) from None
    if args.vocab:
        if not Path(args.vocab).exists():
            raise DataError(f"vocabulary file not found: {args.vocab}")
        lex = Lexicon.load(args.vocab)
    else:
        lex = build_vocab(train_dialogs, cap=extra.get("vocab_cap", 10000))
    tc = TrainConfig(**train_kw)

    if args.ngram:
        order = extra.get("ngram_order", 5)
        cross = extra.get("cross_turn", False)
        lm = KneserNeyLM(lex.words.size, order, cross_turn=cross)
        lm.fit(turn_streams(train_dialogs, lex, cross_turn=cross))
        header = [f"# dclm lexicon {json.dumps(lex.to_json(), separators=(',', ':'))}",
                  f"# dclm vocab_fingerprint {json.dumps(lex.fingerprint())}",
                  f"# dclm cross_turn {json.dumps(cross)}"]
        Path(args.out).write_text(lm.to_arpa(lex.words.id_to_token, header), encoding="utf-8")
        return EXIT_OK

    if args.variant is None:
        raise UsageError("train: --variant is required unless --ngram is given")
    variant = Variant.parse(args.variant)
    for key in ("embed_dim", "hidden_dim"):
        if key not in model_kw:
            raise UsageError(f"train: {key} must be set (config file or --{key.replace('_', '-')})")
    model_kw.setdefault("external_state_dim", model_kw["hidden_dim"])
    model_kw.setdefault("da_embed_dim", model_kw["embed_dim"])
    mcfg = ModelConfig(vocab_size=lex.words.size, da_vocab_size=lex.da.size, **model_kw)
    tr = make_windows(train_dialogs, tc.k, lex)
    va = make_windows(valid_dialogs, tc.k, lex)
    if not tr or not va:
        raise DataError(f"no K={tc.k} windows in the training or validation corpus")
    table = None
    if args.embeddings:
        if not Path(args.embeddings).exists():
            raise DataError(f"embedding file not found: {args.embeddings}")
        try:
            table, filled = load_embedding_file(args.embeddings, lex.words, mcfg.embed_dim)
        except ValueError as err:
            raise DataError(str(err)) from None
        log.info("initialised %d of %d word vectors from %s", filled, lex.words.size, args.embeddings)
    model, tlog = train(variant, mcfg, tc, tr, va, embeddings=table)
    meta = {"format": "dclm-model", "variant": variant.value, "k": tc.k,
            "model_config": model.config.to_json(), "train_config": dataclasses.asdict(tc),
            "lexicon": lex.to_json(), "vocab_fingerprint": lex.fingerprint(),
            "best_epoch": tlog.best_epoch}
    save_checkpoint(args.out, model.params, meta)
    trainlog = args.log or str(Path(args.out).with_suffix(".trainlog.jsonl"))
    tlog.write(trainlog, timing=args.log_timing)
    if args.fig and tlog.records:
        from dclm.plotting import plot_training_curves
        plot_training_curves({variant.value: tlog}, args.fig)
    return EXIT_OK


def _eval_one(path, test_dialogs, k, threads, model_id=None, default_k=1):
    model, lex, meta = load_model(path)
    if k is None:
        k = meta.get("k") or default_k
    windows = make_windows(test_dialogs, k, lex)
    if not windows:
        raise DataError(f"test corpus has no K={k} windows")
    try:
        report = evaluate(model, windows, k, lex, model_id or Path(path).stem,
                          variant=meta["variant"], threads=threads)
    except ValueError as err:
        raise DataError(f"{path}: {err}") from None
    return report, lex


def cmd_eval(args) -> int:
    test = _read(args.test)
    report, _ = _eval_one(args.model, test, args.k, args.threads)
    text = report.dumps()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    print(render_perplexity_table([report]), file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    test = _read(args.test)
    paths = [p for p in args.models.split(",") if p]
    if args.baseline and args.baseline not in paths:
        paths.append(args.baseline)
    ids = _unique_ids(paths)
    # n-gram files carry no K; score them on the same windows as the first checkpoint
    ks = [load_model(p)[2].get("k") for p in paths]
    default_k = next((k for k in ks if k), 1)
    reports, fingerprints = {}, {}
    for p in paths:
        report, lex = _eval_one(p, test, args.k, args.threads, ids[p], default_k)
        reports[p] = report
        fingerprints[p] = lex.fingerprint()
    if len(set(fingerprints.values())) > 1:
        detail = ", ".join(f"{ids[p]}={fp}" for p, fp in fingerprints.items())
        raise DataError(f"vocabulary fingerprint mismatch across models: {detail}")
    rows = sorted(reports.values(), key=lambda r: r.perplexity)
    out = {"reports": [r.to_json() for r in rows], "relative_change": {}}
    text = [render_perplexity_table(rows)]
    base = reports.get(args.baseline) if args.baseline else None
    if base is not None:
        same = [r for r in rows if r.k == base.k and r is not base]
        for r in rows:
            r.baseline_id = base.model_id
        for r in same + [base]:
            out["relative_change"][r.model_id] = relative_change(r, base)
        if same:
            text += ["", render_tag_table(same, base, "pos"), "", render_tag_table(same, base, "da")]
    blob = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(blob + "\n", encoding="utf-8")
    print("\n".join(text))
    if args.fig_dir:
        from dclm.plotting import plot_perplexities, plot_tag_changes
        fig_dir = Path(args.fig_dir)
        fig_dir.mkdir(parents=True, exist_ok=True)
        plot_perplexities(rows, fig_dir / "perplexity.png")
        if base is not None and same:
            plot_tag_changes(same, base, "pos", fig_dir / "pos_change.png")
            plot_tag_changes(same, base, "da", fig_dir / "da_change.png")
    return EXIT_OK


def _unique_ids(paths) -> dict:
    ids = {}
    for p in paths:
        stem = Path(p).stem
        n, cand = 1, stem
        while cand in ids.values():
            n += 1
            cand = f"{stem}#{n}"
        ids[p] = cand
    return ids


def cmd_gradcheck(args) -> int:
    from dclm.gradcheck import gradcheck_variant
    worst = 0.0
    for s in range(args.seeds):
        res = gradcheck_variant(args.variant, dims=args.dims, vocab_size=args.vocab_size,
                                k=args.k, seed=args.seed + s)
        for name, err in res.per_param.items():
            log.info("seed %d %-10s max rel err %.3e", res.seed, name, err)
        worst = max(worst, res.max_error)
    print(f"{Variant.parse(args.variant).value} max_relative_error={worst:.3e}")
    return EXIT_OK if worst <= args.tol else EXIT_DIVERGED


# ---------------------------------------------------------------------------
# parser


def _variant_arg(value: str) -> str:
    try:
        return Variant.parse(value).value
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dclm", description="Dialog-context LSTM language models")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("convert", help="SwDA CSV files -> JSONL corpus")
    c.add_argument("--swda-csv", nargs="+", required=True, metavar="CSV")
    c.add_argument("--out", help="write all dialogs to this JSONL file")
    c.add_argument("--split-dir", help="write train/valid/test.jsonl by SwDA folder")
    c.set_defaults(func=cmd_convert)

    g = sub.add_parser("gen-synthetic", help="generate a synthetic dialog corpus")
    g.add_argument("--dialogs", type=int, default=2000)
    g.add_argument("--vocab-size", type=int, default=200)
    g.add_argument("--turns", type=int, default=6)
    g.add_argument("--dependency", choices=DEPENDENCIES, default="self-echo")
    g.add_argument("--min-len", type=int, default=2)
    g.add_argument("--max-len", type=int, default=5)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.add_argument("--split-dir")
    g.set_defaults(func=cmd_gen_synthetic)

    b = sub.add_parser("build-vocab", help="build the vocabulary from a training corpus")
    b.add_argument("--corpus", required=True)
    b.add_argument("--cap", type=int, default=10000)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_vocab)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--variant", type=_variant_arg, help=", ".join(v.value for v in Variant))
    t.add_argument("--ngram", action="store_true", help="train the modified Kneser-Ney baseline")
    t.add_argument("--corpus", required=True)
    t.add_argument("--valid")
    t.add_argument("--vocab")
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="TrainLog JSONL path (default: <out>.trainlog.jsonl)")
    t.add_argument("--log-timing", action="store_true", help="include wall time in the TrainLog")
    t.add_argument("--fig", help="write a validation-curve PNG here")
    t.add_argument("--embeddings", help="word vectors in 'word v1 ... vd' text format")
    t.add_argument("--threads", type=int, default=1)
    for key, typ in cfgmod.known_keys().items():
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            t.add_argument(flag, dest=key, type=lambda s, k=key: cfgmod.coerce(k, s), default=None)
        else:
            t.add_argument(flag, dest=key, type=typ, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one model on a test corpus")
    e.add_argument("--model", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--k", type=int, help="window size (default: the checkpoint's K)")
    e.add_argument("--out", help="report JSON path (default: stdout)")
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("compare", help="evaluate several models side by side")
    m.add_argument("--models", required=True, help="comma-separated model files")
    m.add_argument("--test", required=True)
    m.add_argument("--baseline", help="model file used for relative changes")
    m.add_argument("--k", type=int)
    m.add_argument("--out", help="combined report JSON")
    m.add_argument("--fig-dir", help="write perplexity and tag-change figures here")
    m.add_argument("--threads", type=int, default=1)
    m.set_defaults(func=cmd_compare)

    q = sub.add_parser("gradcheck", help="finite-difference check of a variant's gradients")
    q.add_argument("--variant", type=_variant_arg, required=True)
    q.add_argument("--dims", type=int, default=8)
    q.add_argument("--vocab-size", type=int, default=20)
    q.add_argument("--k", type=int, default=3)
    q.add_argument("--seeds", type=int, default=1)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--tol", type=float, default=1e-4)
    q.set_defaults(func=cmd_gradcheck)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except cfgmod.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, CheckpointError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
