"""Command-line orchestration: corpus synthesis, training, evaluation,
routing inference, and parameter reports.

Exit codes: 0 ok, 2 bad arguments, 3 missing prerequisite, 4 numeric
failure. The worker cap for evaluation fan-out comes from AVX_THREADS.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from .asr import (
    AsrConfig,
    BaseTrainConfig,
    TrainingDiverged,
    load_asr,
    save_asr,
    train_base,
)
from .audio import (
    CATEGORIES,
    NoiseScenario,
    SCENARIO_IDS,
    build_noise_bank,
    load_noise_bank,
    save_noise_bank,
)
from .config import RunConfig, write_run_stamp
from .corpus import load_corpus, save_corpus, synth_corpus
from .distill import DistillDiverged, DistillSchedule, train_adapters
from .evalkit import eval_grid, save_report
from .fusion import FusionConfig
from .lora import (
    AdapterRegistry,
    count_params,
    format_params_row,
    init_adapter_set,
    load_adapter_set,
    save_adapter_set,
)
from .selector import (
    ClassifierDiverged,
    ClassifierTrainConfig,
    build_classifier_dataset,
    decisions_to_jsonl,
    load_classifier,
    train_classifier,
)
from .systems import DirectSystem, OracleRoutedSystem, RoutedSystem, worker_cap

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_MISSING_PREREQ = 3
EXIT_NUMERIC = 4


class MissingPrerequisite(RuntimeError):
    pass


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingPrerequisite(f"missing {what}: {path}")
    return path


def _model_cfg(cfg: RunConfig) -> AsrConfig:
    return AsrConfig(d_model=cfg.d_model, n_heads=cfg.n_heads, d_ff=cfg.d_ff,
                     enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers)


# -- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = RunConfig(seed=args.seed, train_count=args.train,
                    test_count=args.test, pretrain_count=args.pretrain,
                    noise_clips=args.noise_clips)
    out = Path(args.out)
    corpus_dir = out / "corpus"
    train = synth_corpus(cfg.train_count, seed=cfg.seed, id_prefix="train")
    test = synth_corpus(cfg.test_count, seed=cfg.seed + 1, id_prefix="test")
    save_corpus(train + test, corpus_dir, "manifest.jsonl")
    pretrain = synth_corpus(cfg.pretrain_count, seed=cfg.seed + 2,
                            id_prefix="pretrain")
    save_corpus(pretrain, corpus_dir, "pretrain.jsonl")
    bank = build_noise_bank(cfg.noise_clips, seed=cfg.seed + 3)
    save_noise_bank(bank, out / "noise_bank")
    write_run_stamp(out, cfg, {"command": "synth"})
    print(f"wrote {len(train)} train + {len(test)} test + {len(pretrain)} "
          f"pretrain utterances and a {cfg.noise_clips}-clip/category noise "
          f"bank under {out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------


def _load_splits(data_dir: Path):
    corpus_dir = _need(data_dir / "corpus", "corpus directory")
    _need(corpus_dir / "manifest.jsonl", "corpus manifest")
    train = load_corpus(corpus_dir, "manifest.jsonl", split="train")
    test = load_corpus(corpus_dir, "manifest.jsonl", split="test")
    return corpus_dir, train, test


def cmd_train_base(args) -> int:
    cfg = RunConfig(seed=args.seed, base_steps=args.steps)
    _, train, _ = _load_splits(Path(args.data))
    bt = BaseTrainConfig(steps=cfg.base_steps, seed=cfg.seed)
    model, metrics = train_base(train, bt, _model_cfg(cfg))
    out = Path(args.out)
    save_asr(model, out, {"metrics": {k: v for k, v in metrics.items()
                                      if k != "history"}})
    write_run_stamp(out, cfg, {"command": "train base", "metrics": metrics})
    print(f"base checkpoint at {out}; held-out clean WER "
          f"{metrics['val_wer_percent']:.2f}%")
    return EXIT_OK


def cmd_train_adapters(args) -> int:
    cfg = RunConfig(seed=args.seed, scale_ratio=args.scale_ratio,
                    rank=args.rank)
    data = Path(args.data)
    corpus_dir, train, _ = _load_splits(data)
    _need(corpus_dir / "pretrain.jsonl", "pretrain manifest")
    pretrain = load_corpus(corpus_dir, "pretrain.jsonl")
    bank = load_noise_bank(_need(data / "noise_bank", "noise bank"))
    base = load_asr(_need(Path(args.base), "base checkpoint")).freeze()
    scenario = NoiseScenario.parse(args.scenario)
    n_val = min(48, max(8, len(train) // 20))
    main, val = train[:-n_val], train[-n_val:]
    adapter = init_adapter_set(base, scenario, seed=cfg.seed, rank=cfg.rank,
                               alpha=cfg.alpha,
                               fusion_cfg=FusionConfig(n_layers=cfg.fusion_layers))
    sched = DistillSchedule(
        scale_ratio=cfg.scale_ratio, batch_size=cfg.batch_size,
        clean_prob=cfg.clean_prob,
        lr_multiplier_after_stage1=cfg.lr_multiplier_after_stage1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_adapters(base, adapter, scenario, pretrain, main, val, bank,
                         sched, seed=cfg.seed, log_path=out / "metrics.csv")
    save_adapter_set(res.adapter_set, out, {
        "val_l_ft_initial": res.val_l_ft_initial,
        "val_l_ft_final": res.val_l_ft_final,
        "stage_steps": res.stage_steps,
    })
    write_run_stamp(out, cfg, {"command": f"train adapters {args.scenario}"})
    counts = count_params(base, res.adapter_set)
    print(format_params_row(f"adapters-{scenario.scenario_id}", counts))
    print(f"val l_ft {res.val_l_ft_initial:.4f} -> {res.val_l_ft_final:.4f}; "
          f"base frozen: {res.base_hash_unchanged}")
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    cfg = RunConfig(seed=args.seed, classifier_steps=args.steps)
    data = Path(args.data)
    _, train, _ = _load_splits(data)
    bank = load_noise_bank(_need(data / "noise_bank", "noise bank"))
    tc = ClassifierTrainConfig(steps=cfg.classifier_steps, seed=cfg.seed,
                               clean_prob=cfg.clean_prob)
    n_val = min(100, max(10, len(train) // 20))
    train_ds = build_classifier_dataset(train[:-n_val], bank,
                                        n_draws=tc.dataset_draws,
                                        seed=cfg.seed + 31,
                                        clean_prob=cfg.clean_prob)
    val_ds = build_classifier_dataset(train[-n_val:], bank, n_draws=2 * n_val,
                                      seed=cfg.seed + 37, clean_prob=0.0,
                                      noise_split="val")
    clf, metrics = train_classifier(args.head, train_ds, tc,
                                    val_dataset=val_ds)
    out = Path(args.out)
    from .selector import save_classifier
    save_classifier(clf, out, {"head": args.head, "metrics": metrics})
    write_run_stamp(out, cfg, {"command": f"train classifier {args.head}",
                               "metrics": metrics})
    printable = {k: v for k, v in metrics.items() if k != "history"}
    print(f"classifier ({args.head}) at {out}: {json.dumps(printable)}")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------


def _build_registry(base, set_paths) -> AdapterRegistry:
    registry = AdapterRegistry(base)
    for p in set_paths:
        registry.register(load_adapter_set(_need(Path(p), "adapter set"), base))
    return registry


def cmd_eval(args) -> int:
    data = Path(args.data)
    corpus_dir, _, test = _load_splits(data)
    if not test:
        raise MissingPrerequisite(f"no test split in {corpus_dir}")
    bank = load_noise_bank(_need(data / "noise_bank", "noise bank"))
    base = load_asr(_need(Path(args.base), "base checkpoint")).freeze()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "direct":
        if len(args.set or []) != 1:
            raise ValueError("direct mode takes exactly one --set")
        adapter = load_adapter_set(_need(Path(args.set[0]), "adapter set"), base)
        system = DirectSystem(base, adapter, model_id=args.system)
        report = _eval_direct_sharded(system, test, bank, args.seed)
        counts = count_params(base, adapter)
        report.trainable_params = counts["trainable"]
        report.total_params = counts["total"]
    else:
        registry = _build_registry(base, args.set or [])
        mode = args.mode.removeprefix("routed-")
        if args.oracle:
            system = OracleRoutedSystem(registry, mode, model_id=args.system)
        else:
            clf = load_classifier(_need(Path(args.classifier),
                                        "classifier checkpoint"))
            system = RoutedSystem(registry, clf, mode, model_id=args.system)
        report = eval_grid(system, test, bank, seed=args.seed)
        decisions_to_jsonl(system.decision_log, out / "routing_decisions.jsonl")

    path = out / f"report_{args.system}.{args.report}"
    save_report([report], path, fmt=args.report)
    write_run_stamp(out, RunConfig(seed=args.seed),
                    {"command": f"eval {args.system} {args.mode}"})
    print(f"report written to {path}")
    for row in report.rows:
        print(f"  {row.category:>12} {row.snr_db:>6.1f} dB: "
              f"{row.wer_percent:6.2f}% ({row.n_errors}/{row.n_words})")
    return EXIT_OK


def _eval_direct_sharded(system, test, bank, seed):
    """Category-sharded grid evaluation; AVX_THREADS caps the fan-out.

    Sharding is bit-equivalent to the serial run (cells seed by global
    category id); read-only model access makes it thread-safe.
    """
    workers = min(worker_cap(), len(CATEGORIES))
    if workers <= 1:
        return eval_grid(system, test, bank, seed=seed)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(
            lambda cat: eval_grid(system, test, bank, seed=seed,
                                  categories=[cat]),
            CATEGORIES))
    report = parts[0]
    for extra in parts[1:]:
        report.rows.extend(extra.rows)
    return report


# -- params ---------------------------------------------------------------------


def cmd_params(args) -> int:
    base = load_asr(_need(Path(args.base), "base checkpoint"))
    adapter = load_adapter_set(_need(Path(args.set), "adapter set"), base)
    counts = count_params(base, adapter)
    print(format_params_row(adapter.scenario.scenario_id, counts))
    print(json.dumps(counts))
    return EXIT_OK


# -- wiring ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="avlora",
        description="Desk-scale noise-adaptive AVSR with swappable "
                    "low-rank adapter sets")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="synthesize corpora and the noise bank")
    sp.add_argument("--out", required=True)
    sp.add_argument("--train", type=int, default=2000)
    sp.add_argument("--test", type=int, default=200)
    sp.add_argument("--pretrain", type=int, default=2000)
    sp.add_argument("--noise-clips", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_synth)

    tp = sub.add_parser("train", help="training stages")
    tsub = tp.add_subparsers(dest="target", required=True)

    tb = tsub.add_parser("base", help="supervised clean pre-training")
    tb.add_argument("--data", required=True, help="synth output directory")
    tb.add_argument("--out", required=True)
    tb.add_argument("--steps", type=int, default=500)
    tb.add_argument("--seed", type=int, default=0)
    tb.set_defaults(fn=cmd_train_base)

    ta = tsub.add_parser("adapters", help="distill one adapter set")
    ta.add_argument("--scenario", required=True, choices=SCENARIO_IDS)
    ta.add_argument("--data", required=True)
    ta.add_argument("--base", required=True)
    ta.add_argument("--out", required=True)
    ta.add_argument("--scale-ratio", type=float, default=0.01)
    ta.add_argument("--rank", type=int, default=4)
    ta.add_argument("--seed", type=int, default=0)
    ta.set_defaults(fn=cmd_train_adapters)

    tc = tsub.add_parser("classifier", help="noise-scenario classifier")
    tc.add_argument("--head", required=True, choices=["category", "snr"])
    tc.add_argument("--data", required=True)
    tc.add_argument("--out", required=True)
    tc.add_argument("--steps", type=int, default=1500)
    tc.add_argument("--seed", type=int, default=0)
    tc.set_defaults(fn=cmd_train_classifier)

    ep = sub.add_parser("eval", help="noise-category x SNR WER grid")
    ep.add_argument("--system", required=True, help="model id for the report")
    ep.add_argument("--mode", required=True,
                    choices=["direct", "routed-category", "routed-level"])
    ep.add_argument("--data", required=True)
    ep.add_argument("--base", required=True)
    ep.add_argument("--set", action="append",
                    help="adapter-set checkpoint (repeat for routed modes)")
    ep.add_argument("--classifier")
    ep.add_argument("--oracle", action="store_true",
                    help="route from the true cell scenario")
    ep.add_argument("--report", choices=["csv", "md"], default="csv")
    ep.add_argument("--out", required=True)
    ep.add_argument("--seed", type=int, default=0)
    ep.set_defaults(fn=cmd_eval)

    pp = sub.add_parser("params", help="TrP/ToP parameter report")
    pp.add_argument("--base", required=True)
    pp.add_argument("--set", required=True)
    pp.set_defaults(fn=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_BAD_ARGS if e.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except MissingPrerequisite as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    except FileNotFoundError as e:
        print(f"error: missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING_PREREQ
    except (TrainingDiverged, DistillDiverged, ClassifierDiverged,
            FloatingPointError) as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
