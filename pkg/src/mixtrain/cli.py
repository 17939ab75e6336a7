"""Command-line harness: ``prepare``, ``train``, ``eval``, ``report`` (+ ``toy-corpus``)."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

import mixtrain
from mixtrain import dataio, evaluation
from mixtrain.config import ExperimentConfig, dump_config, load_config
from mixtrain.dataio import ConfigurationError, InterferenceAudio
from mixtrain.model import model_from_snapshot_file
from mixtrain.train import ResumeError, TrainingDivergedError, run_training

logger = logging.getLogger("mixtrain")

PREPARED_FILES = ("keywords.jsonl", "background.jsonl", "interference_train.jsonl", "interference_test.jsonl")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if rev.returncode == 0:
            return f"{mixtrain.__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return mixtrain.__version__


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- prepare


def cmd_prepare(config: ExperimentConfig) -> dict:
    """Scan the corpora and persist manifests, class map and pools with checksums."""
    config.validate_paths()
    d = config.data
    prep = config.out / "prepared"
    records = dataio.scan_keyword_corpus(d.keyword_root, keywords=d.keywords)
    background = dataio.scan_background_segments(d.keyword_root) if d.use_background else []
    pools = ([], [])
    if d.interference_table:
        cand = dataio.read_transcript_table(d.interference_table)
        train_pool, test_pool = dataio.build_interference_pool(
            cand, dataio.GSC_KEYWORDS, d.interference_train_count, d.interference_test_count, config.seed
        )
        pools = (train_pool.records, test_pool.records)
    dataio.write_manifest(prep / "keywords.jsonl", records)
    dataio.write_manifest(prep / "background.jsonl", background)
    dataio.write_manifest(prep / "interference_train.jsonl", pools[0])
    dataio.write_manifest(prep / "interference_test.jsonl", pools[1])
    _write_json(prep / "class_map.json", d.class_map().to_dict())
    checksums = {name: sha256_file(prep / name) for name in (*PREPARED_FILES, "class_map.json")}
    counts = {
        "keywords": {s: sum(r.split == s for r in records) for s in dataio.SPLITS},
        "background": {s: sum(r.split == s for r in background) for s in dataio.SPLITS},
        "interference": {"train": len(pools[0]), "test": len(pools[1])},
    }
    _write_json(prep / "provenance.json", {
        "config_hash": config.config_hash(), "seed": config.seed, "checksums": checksums, "counts": counts,
    })
    logger.info("prepared %d keyword records, %d background segments -> %s", len(records), len(background), prep)
    return checksums


def _load_prepared(config: ExperimentConfig):
    prep = config.out / "prepared"
    if not (prep / "keywords.jsonl").exists():
        raise ConfigurationError(f"no prepared manifests under {prep}; run 'mixtrain prepare' first")
    man = {name: dataio.read_manifest(prep / name) for name in PREPARED_FILES}
    class_map = dataio.ClassMap.from_dict(json.loads((prep / "class_map.json").read_text()))
    return man, class_map


def _subsample(records, fraction: float, seed: int):
    if fraction >= 1.0:
        return list(records)
    by_label: dict[str, list] = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    rng = np.random.default_rng([seed, 11])
    out = []
    for label in sorted(by_label):
        group = by_label[label]
        k = max(1, int(round(fraction * len(group))))
        out.extend(group[i] for i in np.sort(rng.choice(len(group), k, replace=False)))
    return out


# ---------------------------------------------------------------- train


def cmd_train(config: ExperimentConfig) -> Path:
    man, class_map = _load_prepared(config)
    allowed = set(class_map.train_classes)
    every = [r for r in man["keywords.jsonl"] + man["background.jsonl"] if r.label in allowed]
    train = _subsample(dataio.split_records(every, "train"), config.data.subsample_per_class, config.seed)
    val = dataio.split_records(every, "validation")
    interference = None
    if config.train.strategy.needs_interference:
        if not man["interference_train.jsonl"]:
            raise ConfigurationError("strategy needs interference speech but the prepared train pool is empty")
        interference = InterferenceAudio(man["interference_train.jsonl"])
    out = config.out / "train" / config.train.strategy.name
    run_training(config.train, train, class_map, out, val_records=val, interference=interference)
    final = out / "final.npz"
    _write_json(out / "provenance.json", {
        "config_hash": config.config_hash(),
        "train_config_hash": config.train.config_hash(),
        "seed": config.seed,
        "code_version": _code_version(),
        "final_sha256": sha256_file(final),
        "n_train": len(train),
    })
    (out / "config.yaml").write_text(dump_config(config), encoding="utf-8")
    return final


# ---------------------------------------------------------------- eval


def build_condition(config: ExperimentConfig, condition: str, man, class_map):
    test = [r for r in man["keywords.jsonl"] + man["background.jsonl"] if r.split == "test"]
    seed = config.seed
    ev = config.eval
    if condition == "clean":
        return evaluation.build_protocol_test(test, class_map, seed)
    if condition == "mixed":
        return evaluation.build_mixed_test(test, class_map, evaluation.EQUAL_SAMPLED, ev.mixed_items, seed)
    if condition == "weak_1_10":
        return evaluation.build_mixed_test(
            test, class_map, evaluation.ONE_TO_TEN, ev.weak_items, seed, ratio_measure=ev.ratio_measure
        )
    if condition == "noisy_10x":
        pool = man["interference_test.jsonl"]
        if not pool:
            raise ConfigurationError("noisy_10x needs the test interference pool; prepare with an interference table")
        clean = evaluation.build_protocol_test(test, class_map, seed)
        return evaluation.build_noisy_test(clean, InterferenceAudio(pool), seed, ratio_measure=ev.ratio_measure)
    raise ConfigurationError(f"unknown condition {condition!r}")


def cmd_eval(config: ExperimentConfig, snapshot=None, conditions=None, plot: bool = False):
    man, class_map = _load_prepared(config)
    snapshot = Path(snapshot) if snapshot else config.out / "train" / config.train.strategy.name / "final.npz"
    model, manifest = model_from_snapshot_file(snapshot)
    snap_classes = manifest.get("meta", {}).get("class_map", {}).get("train_classes")
    if snap_classes is not None and snap_classes != class_map.train_classes:
        raise ConfigurationError(f"{snapshot} was trained on a different class list than the prepared corpus")
    strategy = manifest.get("meta", {}).get("strategy", config.train.strategy.name)
    out = config.out / "eval" / strategy
    reports = []
    for cond in conditions or config.eval.conditions:
        items = build_condition(config, cond, man, class_map)
        evaluation.write_test_manifest(out / f"test_{cond}.jsonl", items)
        rep = evaluation.evaluate(model, manifest["head"], cond, items, class_map, batch_size=config.eval.batch_size)
        rep.strategy = strategy
        rep.meta.update({"config_hash": config.config_hash(), "seed": config.seed, "snapshot": str(snapshot),
                    "snapshot_sha256": sha256_file(snapshot)})
        logger.info("%s/%s: EER %.2f%%, %s %.2f%% (n=%d)", strategy, cond, rep.eer_percent,
                    rep.accuracy_kind, rep.accuracy_percent, rep.n_items)
        reports.append(rep)
    evaluation.write_reports(out / "reports.jsonl", reports)
    (out / "table.txt").write_text(evaluation.format_table(reports), encoding="utf-8")
    if plot:
        plot_reports(reports, out)
    return reports


def cmd_report(report_files, out_dir, plot: bool = False) -> str:
    reports = []
    for path in report_files:
        reports.extend(evaluation.read_reports(path))
    table = evaluation.format_table(reports)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "table.txt").write_text(table, encoding="utf-8")
    evaluation.write_reports(out_dir / "reports.jsonl", reports)
    if plot:
        plot_reports(reports, out_dir)
    return table


def plot_reports(reports, out_dir) -> list[Path]:
    """One bar chart of accuracy per condition."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for cond in evaluation.CONDITIONS:
        rows = [r for r in reports if r.condition == cond]
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(5, 3))
        names = [evaluation.STRATEGY_ROWS.get(r.strategy, r.strategy) for r in rows]
        ax.bar(names, [r.accuracy_percent for r in rows])
        ax.set_ylabel(f"{rows[0].accuracy_kind} (%)")
        ax.set_ylim(0, 100)
        ax.set_title(cond)
        fig.tight_layout()
        path = Path(out_dir) / f"{cond}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixtrain", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="YAML experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--strategy", choices=["clean", "da", "mixup", "mixup_u", "mt", "mt_n"])
        p.add_argument("--conditions", help="comma-separated subset of " + ",".join(evaluation.CONDITIONS))
        p.add_argument("--out", type=Path, help="output directory")

    common(sub.add_parser("prepare", help="scan corpora, write manifests and interference pools"))
    common(sub.add_parser("train", help="train one strategy"))
    p = sub.add_parser("eval", help="evaluate a snapshot on the test conditions")
    common(p)
    p.add_argument("--snapshot", type=Path, help="default: <out>/train/<strategy>/final.npz")
    p.add_argument("--plot", action="store_true")
    p = sub.add_parser("report", help="combine report files into one table")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--plot", action="store_true")
    p = sub.add_parser("toy-corpus", help="write a small synthetic keyword + interference corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--words", default=",".join(dataio.GSC_KEYWORDS))
    p.add_argument("--per-word", type=int, default=20)
    p.add_argument("--speakers", type=int, default=40)
    p.add_argument("--interference", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "toy-corpus":
            from mixtrain import synthetic

            words = [w for w in args.words.split(",") if w]
            synthetic.write_toy_keyword_corpus(args.out / "keywords", words, args.per_word, args.speakers, args.seed)
            synthetic.write_toy_interference_corpus(args.out / "interference", args.interference, seed=args.seed + 1)
            print(args.out)
            return 0
        if args.command == "report":
            print(cmd_report(args.reports, args.out, args.plot), end="")
            return 0
        conditions = args.conditions.split(",") if args.conditions else None
        config = load_config(args.config, seed=args.seed, strategy=args.strategy, out=args.out, conditions=conditions)
        if args.command == "prepare":
            for name, digest in cmd_prepare(config).items():
                print(f"{digest}  {name}")
        elif args.command == "train":
            print(cmd_train(config))
        elif args.command == "eval":
            reports = cmd_eval(config, args.snapshot, conditions, args.plot)
            print(evaluation.format_table(reports), end="")
    except (ConfigurationError, dataio.AudioError, ResumeError) as exc:
        logger.error("%s", exc)
        return 2
    except (TrainingDivergedError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
