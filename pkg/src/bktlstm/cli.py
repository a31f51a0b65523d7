"""Command-line entry point: ``bktlstm <command> [options]``.

Every command writes its artifacts plus ``manifest.json`` into ``--out``.
Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__, bkt, difficulty, evaluation, predictor, profile, synth
from .dataset import PRESETS, Dataset, clean, load_interactions, split_folds

log = logging.getLogger("bktlstm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, dataset: bool = True) -> None:
    if dataset:
        p.add_argument("--dataset", required=True, help="interaction log (csv or tsv)")
        p.add_argument("--preset", default="canonical", choices=sorted(PRESETS), help="column layout of --dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True, help="output directory")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = predictor.RnnConfig()
    g = bkt.GridSpec()
    p.add_argument("--window", type=int, default=20, help="attempts per ability interval")
    p.add_argument("--clusters", type=int, default=7)
    p.add_argument("--hidden", type=int, default=d.hidden_size)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--dropout", type=float, default=d.dropout_rate)
    p.add_argument("--cell", choices=("gated", "simple"), default=d.cell)
    p.add_argument("--clip", type=float, default=d.max_grad_norm, help="max gradient norm")
    p.add_argument("--grid-step", type=float, default=g.step)
    p.add_argument("--g-max", type=float, default=g.g_max)
    p.add_argument("--s-max", type=float, default=g.s_max)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--no-skill-input", action="store_true", help="drop the skill one-hot from the BKT-LSTM input")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bktlstm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="clean a raw log and write the canonical csv")
    _add_common(p)

    p = sub.add_parser("fit", help="fit per-skill BKT parameters")
    _add_common(p)
    _add_model_flags(p)

    p = sub.add_parser("cluster", help="fit ability-profile centroids and label every interval")
    _add_common(p)
    _add_model_flags(p)

    p = sub.add_parser("difficulty", help="compute problem difficulty bins")
    _add_common(p)

    p = sub.add_parser("train", help="train BKT-LSTM on every student of --dataset")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--variant", type=int, choices=(1, 2, 3, 4), default=4)

    for name in ("evaluate", "pipeline"):
        p = sub.add_parser(name, help="cross-validated evaluation of one or more models")
        _add_common(p)
        _add_model_flags(p)
        p.add_argument(
            "--model",
            action="append",
            choices=(*evaluation.MODEL_NAMES, "all"),
            help="repeatable; default bkt-lstm",
        )
        p.add_argument("--variant", type=int, choices=(1, 2, 3, 4), default=4)

    p = sub.add_parser("ablate", help="BKT-LSTM-1..4 ablation")
    _add_common(p)
    _add_model_flags(p)

    p = sub.add_parser("synth", help="sample a synthetic dataset from BKT")
    _add_common(p, dataset=False)
    p.add_argument("--students", type=int, default=500)
    p.add_argument("--attempts", type=int, default=50)
    p.add_argument("--skills", type=int, default=1)
    p.add_argument("--problems-per-skill", type=int, default=60)
    p.add_argument("--l0", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--g", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--difficulty-strength", type=float, default=0.0)
    p.add_argument("--ability-sd", type=float, default=0.0)
    return parser


# --- helpers --------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, args: argparse.Namespace, artifacts: Sequence[Path]) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    manifest = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "artifacts": {p.name: _sha256(p) for p in artifacts},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> Dataset:
    path = Path(args.dataset)
    if not path.is_file():
        raise FileNotFoundError(f"cannot read {path}")
    return clean(load_interactions(path, preset=args.preset))


def _rnn_config(args) -> predictor.RnnConfig:
    return predictor.RnnConfig(
        hidden_size=args.hidden,
        learning_rate=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        dropout_rate=args.dropout,
        cell=args.cell,
        seed=args.seed,
        max_grad_norm=args.clip,
    )


def _grid(args) -> bkt.GridSpec:
    return bkt.GridSpec(step=args.grid_step, g_max=args.g_max, s_max=args.s_max)


def _spec(args, name: str = "bkt-lstm", variant: int = 4) -> evaluation.ModelSpec:
    return evaluation.ModelSpec(
        name=name,
        variant=variant,
        rnn=_rnn_config(args),
        grid=_grid(args),
        window=args.window,
        k_clusters=args.clusters,
        include_skill=not args.no_skill_input,
    )


def _summary_line(summary: dict) -> str:
    return "  ".join(f"{k}={v}" for k, v in summary.items())


# --- commands -------------------------------------------------------------------------


def cmd_ingest(args) -> list[Path]:
    out = _outdir(args)
    path = Path(args.dataset)
    if not path.is_file():
        raise FileNotFoundError(f"cannot read {path}")
    raw = load_interactions(path, preset=args.preset)
    data = clean(raw)
    dest = out / "cleaned.csv"
    data.to_csv(dest)
    summary = out / "summary.tsv"
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("skills\tproblems\tstudents\trecords\n")
        s = data.summary()
        fh.write(f"{s['skills']}\t{s['problems']}\t{s['students']}\t{s['records']}\n")
    print(_summary_line(data.summary()))
    if raw.meta.get("malformed_rows"):
        print(f"skipped {raw.meta['malformed_rows']} malformed row(s)", file=sys.stderr)
    return [dest, summary]


def cmd_fit(args) -> list[Path]:
    out = _outdir(args)
    data = _load(args)
    models = bkt.fit_skills(data, _grid(args))
    dest = out / "bkt_params.tsv"
    bkt.save_models(models, data.skill_ids, dest)
    print(f"fitted {len(models)} skill model(s)")
    return [dest]


def cmd_cluster(args) -> list[Path]:
    out = _outdir(args)
    data = _load(args)
    model = profile.fit_kmeans(profile.training_vectors(data, args.window), k=args.clusters, seed=args.seed)
    c_path, p_path = out / "centroids.tsv", out / "profiles.tsv"
    profile.save_centroids(model, data.skill_ids, c_path)
    profile.save_profiles(profile.profile_rows(data, model, args.window), p_path)
    print(f"k-means: {model.n_iter} iteration(s), objective {model.objective_history[-1]:.6g}")
    return [c_path, p_path]


def cmd_difficulty(args) -> list[Path]:
    out = _outdir(args)
    data = _load(args)
    table = difficulty.compute_difficulty(data)
    dest = out / "difficulty.tsv"
    difficulty.save_table(table, data.problem_ids, dest)
    print(f"{len(table.levels)} problem(s) binned, {len(table.support) - len(table.levels)} defaulted to 5")
    return [dest]


def cmd_train(args) -> list[Path]:
    out = _outdir(args)
    data = _load(args)
    spec = _spec(args, variant=args.variant)
    art = evaluation.fit_features(data, spec)
    model, report = predictor.train(spec.rnn, evaluation.encode_dataset(data, art, spec), n_skills=data.n_skills)
    ckpt = out / "model.npz"
    predictor.save_checkpoint(model, ckpt)
    losses = out / "train_loss.tsv"
    with open(losses, "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\n")
        for i, v in enumerate(report.epoch_losses, start=1):
            fh.write(f"{i}\t{v:.17g}\n")
    print(f"trained {spec.label}: final loss {report.epoch_losses[-1]:.4f}")
    return [ckpt, losses]


def _write_reports(out: Path, reports: list[evaluation.EvalReport], name: str) -> list[Path]:
    txt, rows = out / "report.txt", out / "report_rows.tsv"
    txt.write_text(evaluation.format_tables(reports, name), encoding="utf-8")
    with open(rows, "w", newline="", encoding="utf-8") as fh:
        evaluation.write_rows(reports, fh)
    return [txt, rows]


def cmd_evaluate(args) -> list[Path]:
    out = _outdir(args)
    data = _load(args)
    names = args.model or ["bkt-lstm"]
    if "all" in names:
        names = list(evaluation.MODEL_NAMES)
    reports: list[evaluation.EvalReport] = []
    written: list[Path] = []
    folds = split_folds(data, args.folds, args.seed)
    for name in dict.fromkeys(names):
        reports.append(evaluation.cross_validate(data, _spec(args, name, args.variant), folds=folds))
        written = _write_reports(out, reports, Path(args.dataset).stem)  # partial results survive a later failure
    print(evaluation.format_tables(reports, Path(args.dataset).stem), end="")
    if any(r.failures for r in reports):
        raise RuntimeError("one or more folds failed; see report.txt")
    return written


def cmd_ablate(args) -> list[Path]:
    out = _outdir(args)
    data = _load(args)
    reports = evaluation.ablate(data, seed=args.seed, spec=_spec(args), k=args.folds)
    written = _write_reports(out, reports, Path(args.dataset).stem)
    print(evaluation.format_tables(reports, Path(args.dataset).stem), end="")
    return written


def cmd_synth(args) -> list[Path]:
    out = _outdir(args)
    given = [args.l0, args.t, args.g, args.s]
    if any(v is not None for v in given) and not all(v is not None for v in given):
        raise UsageError("--l0, --t, --g and --s must be given together")
    params = None
    if all(v is not None for v in given):
        try:
            params = (bkt.BktParams(*given),) * args.skills
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    config = synth.SynthConfig(
        n_students=args.students,
        attempts=args.attempts,
        n_skills=args.skills,
        problems_per_skill=args.problems_per_skill,
        params=params,
        difficulty_strength=args.difficulty_strength,
        ability_sd=args.ability_sd,
        seed=args.seed,
    )
    data_path, truth_path = synth.write(config, out)
    print(f"wrote {data_path} and {truth_path}")
    return [data_path, truth_path]


COMMANDS = {
    "ingest": cmd_ingest,
    "fit": cmd_fit,
    "cluster": cmd_cluster,
    "difficulty": cmd_difficulty,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_evaluate,
    "ablate": cmd_ablate,
    "synth": cmd_synth,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        artifacts = COMMANDS[args.command](args)
        _write_manifest(Path(args.out), args, artifacts)
    except UsageError as exc:
        print(f"bktlstm: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"bktlstm: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
