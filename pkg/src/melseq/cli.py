"""``melseq`` command-line interface.

Exit codes: 0 success, 1 gradient check failure, 2 bad input (missing
corpus, config or ratings problems, empty text), 3 unreadable or
incompatible checkpoint / alignment file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from melseq import audio, data, evaluation, synthesis, training
from melseq.errors import CorpusError, FormatError, InputError, MelseqError

log = logging.getLogger("melseq")

EXIT_OK, EXIT_GRADCHECK, EXIT_INPUT, EXIT_FILE = 0, 1, 2, 3


class CommandError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _load_config(path):
    if path is None:
        return training.TrainConfig()
    if not Path(path).is_file():
        raise CommandError(EXIT_INPUT, f"config file not found: {path}")
    try:
        return training.TrainConfig.from_file(path)
    except MelseqError as e:
        raise CommandError(EXIT_INPUT, f"bad config {path}: {e}") from e


def _load_corpus(corpus_dir, max_utts, workers=1):
    corpus_dir = Path(corpus_dir)
    if not (corpus_dir / "metadata.csv").is_file():
        raise CommandError(EXIT_INPUT, f"corpus not found: {corpus_dir} (expected {corpus_dir / 'metadata.csv'})")
    try:
        return data.load_corpus(corpus_dir, max_utts=max_utts, workers=workers)
    except (CorpusError, FormatError, FileNotFoundError) as e:
        raise CommandError(EXIT_INPUT, f"cannot load corpus {corpus_dir}: {e}") from e


def _load_checkpoint(path):
    try:
        ckpt = training.load_checkpoint(path)
        synthesis.check_compatible(ckpt)
    except FileNotFoundError as e:
        raise CommandError(EXIT_FILE, f"checkpoint not found: {path}") from e
    except (FormatError, KeyError, ValueError) as e:
        raise CommandError(EXIT_FILE, f"bad checkpoint {path}: {e}") from e
    return ckpt


# -- subcommands -----------------------------------------------------------------


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    corpus = _load_corpus(args.corpus, args.max_utts, args.workers)
    out = Path(args.out)
    log.info("training on %d utterances, guided=%s, output %s", len(corpus), not args.no_guided, out)
    trainer = training.train(cfg, corpus, with_guided=not args.no_guided, out_dir=out, steps=args.steps)
    print(f"trained {trainer.step} steps; checkpoint {out / 'final.msqk'}")
    return EXIT_OK


def cmd_synth(args):
    if not args.text or not args.text.strip():
        raise CommandError(EXIT_INPUT, "--text is empty")
    ckpt = _load_checkpoint(args.checkpoint)
    opts = synthesis.SynthesisOptions(
        max_steps=args.max_steps,
        forced_incremental=not args.no_forced_attn,
        seed=args.seed,
        griffin_lim_iters=args.gl_iters,
    )
    try:
        res = synthesis.synthesize(args.text, ckpt, opts)
    except InputError as e:
        raise CommandError(EXIT_INPUT, str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    audio.wav_write(out / f"{args.name}.wav", res.waveform)
    audio.write_mspc(out / f"{args.name}.mel.mspc", res.mel.astype(np.float32))
    evaluation.render_alignment(res.alignment, out / f"{args.name}.alignment.pgm")
    if res.hit_max_steps:
        log.warning("stop token never fired; output cut at %d decode steps", opts.max_steps)
    print(f"{res.n_steps} decode steps, {res.mel.shape[0]} frames, {res.waveform.duration:.2f} s -> {out}")
    return EXIT_OK


def _find_alignment(src):
    src = Path(src)
    if src.is_dir():
        final = src / "alignment_final.mspc"
        if final.is_file():
            return final
        snaps = sorted(src.glob("alignment_*.mspc"))
        if not snaps:
            raise CommandError(EXIT_INPUT, f"no alignment_*.mspc files in {src}")
        return snaps[-1]
    if not src.is_file():
        raise CommandError(EXIT_INPUT, f"alignment file not found: {src}")
    return src


def cmd_plot_attention(args):
    path = _find_alignment(args.source)
    try:
        A = audio.read_mspc(path)
    except FormatError as e:
        raise CommandError(EXIT_FILE, f"corrupt alignment {path}: {e}") from e
    if not np.all(np.isfinite(A)) or (A.size and A.min() < 0):
        raise CommandError(EXIT_FILE, f"corrupt alignment {path}: values must be finite and non-negative")
    out = Path(args.out) if args.out else path.with_suffix(".pgm")
    evaluation.render_alignment(A, out)
    print(f"{A.shape[0]} chars x {A.shape[1]} steps -> {out}")
    return EXIT_OK


def cmd_mos_stats(args):
    try:
        rows = evaluation.read_ratings(args.ratings)
    except FileNotFoundError as e:
        raise CommandError(EXIT_INPUT, f"ratings file not found: {args.ratings}") from e
    except FormatError as e:
        raise CommandError(EXIT_INPUT, f"{args.ratings}: {e}") from e
    if not rows:
        raise CommandError(EXIT_INPUT, f"{args.ratings}: ratings file is empty")
    groups = evaluation.group_by_set(rows)
    if len(groups) > 1:
        for name, ratings in groups.items():
            s = evaluation.mos(ratings)
            print(f"{name}: {s} (n={s.n})")
    s = evaluation.mos(r for _, _, r in rows)
    print(f"MOS: {s} (n={s.n})")
    return EXIT_OK


def cmd_gradcheck(args):
    seeds = [args.seed] if args.seed is not None else list(range(10))
    worst = evaluation.run_gradcheck(seeds)
    width = max(map(len, worst))
    for name, err in worst.items():
        flag = "" if err < evaluation.GRADCHECK_TOL else "  FAIL"
        print(f"{name:<{width}}  {err:.3e}{flag}")
    name, err = max(worst.items(), key=lambda kv: kv[1])
    if err >= evaluation.GRADCHECK_TOL:
        print(f"gradcheck FAILED: worst component {name} rel error {err:.3e} >= {evaluation.GRADCHECK_TOL:g}", file=sys.stderr)
        return EXIT_GRADCHECK
    print(f"gradcheck passed: {len(worst)} components over seeds {seeds}, worst {name} {err:.3e}")
    return EXIT_OK


def cmd_align_experiment(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    corpus = _load_corpus(args.corpus, args.max_utts, args.workers)
    out = Path(args.out)
    report = evaluation.align_experiment(
        cfg, corpus, args.steps, out_dir=out, snapshot_every=args.snapshot_every, parallel=args.parallel
    )
    print(report)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="melseq", description="Seq2seq text-to-speech with guided attention.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("config", nargs="?", help="key = value config file (defaults if omitted)")
    t.add_argument("corpus", help="corpus directory containing metadata.csv and wavs/")
    t.add_argument("--out", default="melseq_run", help="output directory")
    t.add_argument("--no-guided", action="store_true", help="disable the guided attention loss")
    t.add_argument("--max-utts", type=int, default=None, help="keep only the K shortest utterances")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--steps", type=int, default=None, help="override the total step count")
    t.add_argument("--workers", type=int, default=1, help="feature extraction threads")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("synth", help="synthesize speech from text")
    s.add_argument("checkpoint")
    s.add_argument("--text", required=True)
    s.add_argument("--out", default=".", help="output directory")
    s.add_argument("--name", default="synth", help="output file stem")
    s.add_argument("--no-forced-attn", action="store_true", help="disable forced incremental attention")
    s.add_argument("--max-steps", type=int, default=200)
    s.add_argument("--gl-iters", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("plot-attention", help="render an alignment matrix as a PGM image")
    a.add_argument("source", help="alignment .mspc file or a training output directory")
    a.add_argument("--out", default=None, help="output .pgm path")
    a.set_defaults(func=cmd_plot_attention)

    m = sub.add_parser("mos-stats", help="mean opinion score with 95%% interval")
    m.add_argument("ratings", help="CSV with sample_id,rater_id,rating")
    m.set_defaults(func=cmd_mos_stats)

    g = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    g.add_argument("--seed", type=int, default=None, help="single seed (default: seeds 0-9)")
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("align-experiment", help="guided vs unguided alignment speed")
    e.add_argument("corpus")
    e.add_argument("--config", default=None)
    e.add_argument("--steps", type=int, default=10000)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--max-utts", type=int, default=100)
    e.add_argument("--out", default="align_experiment")
    e.add_argument("--snapshot-every", type=int, default=None)
    e.add_argument("--parallel", action="store_true", help="run both arms on separate threads")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_align_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as e:
        print(f"melseq {args.command}: {e}", file=sys.stderr)
        return e.code
    except MelseqError as e:
        print(f"melseq {args.command}: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
