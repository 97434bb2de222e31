"""Operator surface: make-data, train, ablate, extract, score, metrics,
analyze, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 runtime numeric failure,
3 missing artifact. SEVERIF_SEED overrides the config seed. Every command
freezes its resolved config under <out>/configs/ for the audit trail.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import analysis as analysis_mod
from . import tensor as tensor_mod
from .checkpoint import ContainerError, metadata_to_text, write_container
from .config import ConfigError, RunConfig, parse_config_text
from .gradcheck import run_suite
from .metrics import (DCFParams, metrics_report, read_trials, score_set_from_files,
                      write_metrics_report)
from .pipeline import (CHECKPOINT_NAME, MissingArtifactError, SCORES_NAME, TRIALS_NAME,
                       corpus_dir, evaluate_checkpoint, extract_embeddings, load_checkpoint,
                       load_corpus, run_ablation, run_training, write_corpus)
from .tensor import NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_MISSING = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_run_config(args) -> RunConfig:
    overrides: dict[str, str] = {}
    if args.config:
        if not os.path.exists(args.config):
            raise MissingArtifactError(f"config file not found: {args.config}")
        with open(args.config, "r", encoding="utf-8") as f:
            overrides = parse_config_text(f.read())
    if getattr(args, "out", None):
        overrides["out"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    env_seed = os.environ.get("SEVERIF_SEED")
    if env_seed:
        overrides["seed"] = env_seed
    return RunConfig(overrides)


def freeze_config(config: RunConfig, command: str) -> None:
    cfg_dir = os.path.join(config.out_dir, "configs")
    os.makedirs(cfg_dir, exist_ok=True)
    with open(os.path.join(cfg_dir, f"{command}.resolved.cfg"), "w", encoding="utf-8") as f:
        f.write(config.render())


def _print(msg: str) -> None:
    print(msg, flush=True)


# ---- subcommands ------------------------------------------------------------


def cmd_make_data(args) -> int:
    config = load_run_config(args)
    freeze_config(config, "make-data")
    cdir = write_corpus(config)
    n = config["data.num_speakers"] * config["data.utts_per_speaker"]
    _print(f"wrote corpus: {n} utterances, {config['data.num_speakers']} speakers -> {cdir}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args)
    freeze_config(config, "train")
    utts = load_corpus(corpus_dir(config))
    run_dir = os.path.join(config.out_dir, "train")
    result = run_training(config, utts, run_dir, log_fn=_print)
    _print(f"checkpoint -> {result.checkpoint_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = load_run_config(args)
    freeze_config(config, "ablate")
    results = run_ablation(config, args.grid, log_fn=_print)
    _print(f"ablation results -> {results}")
    return EXIT_OK


def cmd_extract(args) -> int:
    config = load_run_config(args)
    freeze_config(config, "extract")
    ckpt = args.checkpoint or os.path.join(config.out_dir, "train", CHECKPOINT_NAME)
    model, _head, _meta = load_checkpoint(ckpt)
    utts = load_corpus(corpus_dir(config))
    emb = extract_embeddings(model, utts)
    out_dir = os.path.join(config.out_dir, "embeddings")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "embeddings.sevx")
    write_container(path, metadata_to_text({"embeddings.checkpoint": ckpt}),
                    sorted(emb.items()))
    _print(f"wrote {len(emb)} embeddings -> {path}")
    return EXIT_OK


def cmd_score(args) -> int:
    config = load_run_config(args)
    freeze_config(config, "score")
    ckpt = args.checkpoint or os.path.join(config.out_dir, "train", CHECKPOINT_NAME)
    trials_path = args.trials or os.path.join(corpus_dir(config), TRIALS_NAME)
    if not os.path.exists(trials_path):
        raise MissingArtifactError(f"trial list not found: {trials_path}")
    trials = read_trials(trials_path)
    utts = load_corpus(corpus_dir(config))
    out_dir = os.path.join(config.out_dir, "scores")
    os.makedirs(out_dir, exist_ok=True)
    scores_path = os.path.join(out_dir, SCORES_NAME)
    dcf = DCFParams(config["eval.p_target"], config["eval.c_miss"], config["eval.c_fa"])
    report = evaluate_checkpoint(ckpt, utts, trials, dcf, scores_path=scores_path)
    _print(f"scores -> {scores_path} (eer={report['eer_percent']}%)")
    return EXIT_OK


def cmd_metrics(args) -> int:
    config = load_run_config(args)
    freeze_config(config, "metrics")
    scores_path = args.scores or os.path.join(config.out_dir, "scores", SCORES_NAME)
    trials_path = args.trials or os.path.join(corpus_dir(config), TRIALS_NAME)
    for path in (scores_path, trials_path):
        if not os.path.exists(path):
            raise MissingArtifactError(f"missing input: {path}")
    scoreset = score_set_from_files(trials_path, scores_path)
    dcf = DCFParams(config["eval.p_target"], config["eval.c_miss"], config["eval.c_fa"])
    report = metrics_report(scoreset, dcf)
    out_dir = os.path.join(config.out_dir, "metrics")
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_report(os.path.join(out_dir, "metrics.tsv"), report)
    for k, v in report.items():
        _print(f"{k}\t{v}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = load_run_config(args)
    freeze_config(config, "analyze")
    ckpt = args.checkpoint or os.path.join(config.out_dir, "train", CHECKPOINT_NAME)
    model, _head, _meta = load_checkpoint(ckpt)
    utts = load_corpus(corpus_dir(config))
    records = analysis_mod.capture_excitations(
        model, ((u.utterance_id, u.speaker_id, u.features) for u in utts),
        all_blocks=args.all_blocks)
    profiles, dispersion = analysis_mod.across_speaker_profile(records)
    out_dir = os.path.join(config.out_dir, "analysis")
    os.makedirs(out_dir, exist_ok=True)
    report = analysis_mod.render_report(profiles, dispersion)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report)
    with open(os.path.join(out_dir, "analysis.tsv"), "w", encoding="utf-8") as f:
        f.write(analysis_mod.profiles_to_tsv(profiles))
    write_container(os.path.join(out_dir, "profiles.sevx"),
                    metadata_to_text({"analysis.checkpoint": ckpt}),
                    analysis_mod.profiles_to_tensors(profiles))
    _print(report.rstrip("\n"))
    _print(f"analysis -> {out_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seeds))
    results = run_suite(seeds=seeds)
    failures = 0
    for r in results:
        _print(r.line())
        failures += 0 if r.passed else 1
    _print(f"gradcheck: {len(results) - failures}/{len(results)} passed")
    if failures:
        raise NumericError(f"{failures} gradient check(s) failed")
    return EXIT_OK


# ---- parser -----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="sevx", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--sequential", action="store_true",
                        help="bit-exact single-thread mode")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="config file of dotted key = value lines")
        p.add_argument("--out", help="override output directory")
        p.add_argument("--seed", type=int, help="override seed")
        p.set_defaults(fn=fn)
        return p

    add("make-data", cmd_make_data, help="generate the synthetic corpus + trial list")
    add("train", cmd_train, help="train a model on the corpus")
    p = add("ablate", cmd_ablate, help="sweep an SE configuration grid")
    p.add_argument("--grid", required=True,
                   help="e.g. 'stages=1|1,2|1,2,3|1,2,3,4' or 'pooling=max|mean|std|mean_std'")
    p = add("extract", cmd_extract, help="extract embeddings for the corpus")
    p.add_argument("--checkpoint")
    p = add("score", cmd_score, help="score the trial list with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--trials")
    p = add("metrics", cmd_metrics, help="EER / minDCF from score + trial files")
    p.add_argument("--scores")
    p.add_argument("--trials")
    p = add("analyze", cmd_analyze, help="excitation-distribution analysis")
    p.add_argument("--checkpoint")
    p.add_argument("--all-blocks", action="store_true",
                   help="probe every SE block, not just the last per stage")
    p = add("gradcheck", cmd_gradcheck, help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    was_sequential = tensor_mod.is_sequential()
    try:
        args = parser.parse_args(argv)
        if args.sequential:
            tensor_mod.set_sequential(True)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ContainerError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        tensor_mod.set_sequential(was_sequential)


def entry() -> None:
    sys.exit(main())
