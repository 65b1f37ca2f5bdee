"""``waydcm`` command line: generate, fit-dcm, train, eval, compare, inspect.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .choice import BetaVector, fit_mnl, goal_probabilities, interpretability_report, write_beta_table
from .config import ConfigError, RunConfig, load
from .data import build_example
from .features import FEATURES, VARIANT_FEATURES, FeatureScaler, feature_columns
from .metrics import write_metric_csv
from .model import VARIANTS
from .scene import SceneError, read_scenes
from .synth import generate, sidecar_path
from .train import NumericalError, compare_variants, predict, train, write_train_log

log = logging.getLogger("waydcm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DCM_VARIANTS = tuple(v for v in VARIANTS if v != "LSTM")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def header_lines(cfg: RunConfig, command: str) -> list[str]:
    return [f"waydcm {__version__} {command}", f"config_hash={cfg.hash()}", f"seed={cfg.seed}"]


def run_meta(cfg: RunConfig, command: str) -> dict:
    return {"version": __version__, "command": command, "config_hash": cfg.hash(), "seed": cfg.seed}


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _scenes(cfg: RunConfig):
    if not cfg.paths.scenes:
        raise UsageError("no scenes file given (use --scenes or paths.scenes)")
    try:
        return read_scenes(cfg.paths.scenes)
    except OSError as exc:
        raise DataError(f"cannot read scenes {cfg.paths.scenes}: {exc}") from exc


def _sidecar(cfg: RunConfig) -> dict | None:
    p = Path(sidecar_path(cfg.paths.scenes))
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"bad corpus metadata {p}: {exc}") from exc


def _examples(cfg: RunConfig, scenes, need_future=True):
    out = []
    for s in scenes:
        if need_future and s.future is None:
            raise DataError(f"scene {s.id} has no ground-truth future")
        out.append(build_example(s, cfg.pipeline))
    return out


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --- commands ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    corpus = generate(cfg.gen_config())
    corpus.meta = run_meta(cfg, "generate")
    path = out / "corpus.jsonl"
    try:
        corpus.write(path)
    except OSError as exc:
        raise DataError(f"cannot write corpus {path}: {exc}") from exc
    hist = np.bincount(np.asarray(corpus.drawn, dtype=int), minlength=cfg.grid.K)
    n_nb = [len(s.neighbors) for s in corpus.scenes]
    summary = {
        "scenes": len(corpus.scenes),
        "mean_neighbors": float(np.mean(n_nb)) if n_nb else 0.0,
        "label_histogram": hist.tolist(),
        "corpus": str(path),
        **run_meta(cfg, "generate"),
    }
    _json_dump(out / "generate_summary.json", summary)
    print(f"scenes: {summary['scenes']}")
    print(f"mean neighbors: {summary['mean_neighbors']:.3f}")
    print("label histogram: " + " ".join(str(c) for c in summary["label_histogram"]))
    print(f"wrote {path} and {sidecar_path(path)}")
    return EXIT_OK


def cmd_fit_dcm(cfg: RunConfig, args) -> int:
    variant = args.variant or "WayDCM2"
    if variant not in DCM_VARIANTS:
        raise UsageError(f"fit-dcm needs one of {DCM_VARIANTS}, got {variant!r}")
    scenes = _scenes(cfg)
    if not scenes:
        raise DataError("corpus is empty")
    examples = _examples(cfg, scenes)
    meta = _sidecar(cfg)
    raw = np.stack([ex.raw_features for ex in examples])
    if meta and "scaler" in meta:
        scaler = FeatureScaler.from_dict(meta["scaler"])
    else:
        scaler = FeatureScaler.fit(raw.reshape(-1, raw.shape[-1]))
    names = VARIANT_FEATURES[variant]
    X = scaler.transform(raw)[..., feature_columns(names)]
    labels = np.array([ex.k_star for ex in examples])
    fc = cfg.fit
    report = fit_mnl(X, labels, names, tol=fc.tol, max_iter=fc.max_iter, l2=fc.l2)
    if not np.all(np.isfinite(report.beta)):
        raise NumericalError("fit diverged")
    out = _out_dir(cfg)
    doc = {**report.to_dict(), "variant": variant, "n_scenes": len(examples), "scaler": scaler.to_dict(), **run_meta(cfg, "fit-dcm")}
    _json_dump(out / f"fit_{variant}.json", doc)
    betas = {variant: report.beta_vector}
    write_beta_table(out / f"beta_{variant}.csv", interpretability_report(betas), header_lines(cfg, "fit-dcm"))
    from .plotting import beta_bars

    truth = BetaVector.from_values([meta["true_beta"][n] for n in FEATURES]) if meta and "true_beta" in meta else None
    beta_bars(out / f"beta_{variant}.png", betas, truth)
    for n, b in zip(names, report.beta):
        print(f"beta_{n} = {b:+.4f}")
    print(f"nll = {report.nll:.4f}, iterations = {report.iterations}, converged = {report.converged}")
    return EXIT_OK


def _ckpt_extra(cfg: RunConfig, res) -> dict:
    return {
        **run_meta(cfg, "train"),
        "train": res.config.to_dict(),
        "l_star_rule": "mode with the smallest final displacement",
        "best_epoch": res.best_epoch,
        "val_scenes": [int(i) for i in res.val_idx],
    }


def cmd_train(cfg: RunConfig, args) -> int:
    scenes = _scenes(cfg)
    if not scenes:
        raise DataError("corpus is empty")
    examples = _examples(cfg, scenes)
    tcfg = cfg.train_config()
    res = train(examples, tcfg, cfg.pipeline, cfg.model_base(), progress=_progress)
    out = _out_dir(cfg)
    ckpt = Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / f"model_{tcfg.variant}.json"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, res.params, res.model, res.scaler, _ckpt_extra(cfg, res))
    write_train_log(out / f"train_log_{tcfg.variant}.csv", res.log, header_lines(cfg, "train"))
    from .plotting import training_curve

    training_curve(out / f"train_log_{tcfg.variant}.png", res.log, tcfg.variant)
    print(f"best epoch {res.best_epoch}; checkpoint {ckpt}")
    return EXIT_OK


def _progress(row):
    log.info("epoch %d total %.4f val %.4f", row["epoch"], row["total"], row["val_total"])


def _load_ckpt(cfg: RunConfig):
    if not cfg.paths.checkpoint:
        raise UsageError("no checkpoint given (use --checkpoint)")
    return load_checkpoint(cfg.paths.checkpoint)


def cmd_eval(cfg: RunConfig, args) -> int:
    ck = _load_ckpt(cfg)
    scenes = _scenes(cfg)
    if not scenes:
        raise DataError("corpus is empty")
    examples = _examples(cfg, scenes)
    if examples[0].future.shape[0] != ck.model.t_f:
        raise DataError(f"scenes have t_f={examples[0].future.shape[0]}, checkpoint expects {ck.model.t_f}")
    from .train import evaluate

    report = evaluate(ck.params, ck.model, examples, ck.scaler)
    if not all(np.isfinite(list(report.min_fde.values()))):
        raise NumericalError("non-finite metrics")
    out = _out_dir(cfg)
    row = {"variant": ck.model.variant, **report.row()}
    write_metric_csv(out / f"metrics_{ck.model.variant}.csv", [row], header_lines(cfg, "eval"))
    for k, v in report.row().items():
        print(f"{k}: {v}")
    return EXIT_OK


COMPARE_COLUMNS = ("variant", "seed", "n_scenes", "minADE_6", "minFDE_6", "minADE_1", "minFDE_1", *(f"beta_{n}" for n in FEATURES), "best_epoch")


def comparison_rows(rows) -> list[dict]:
    out = []
    for r in rows:
        d = {"variant": r.variant, "seed": r.seed, **r.report.row()}
        for n in FEATURES:
            v = None if r.beta is None else getattr(r.beta, f"beta_{n}")
            d[f"beta_{n}"] = "-" if v is None else v
        d["best_epoch"] = r.best_epoch
        out.append({c: d[c] for c in COMPARE_COLUMNS})
    return out


def cmd_compare(cfg: RunConfig, args) -> int:
    scenes = _scenes(cfg)
    if not scenes:
        raise DataError("corpus is empty")
    examples = _examples(cfg, scenes)
    rows = compare_variants(examples, cfg.train_config(), VARIANTS, cfg.pipeline, cfg.model_base(), progress=_progress)
    out = _out_dir(cfg)
    table = comparison_rows(rows)
    write_metric_csv(out / "comparison.csv", table, header_lines(cfg, "compare"))
    # wall-clock times vary run to run, so they live apart from the deterministic table
    with open(out / "runtimes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "runtime_s"])
        for r in rows:
            w.writerow([r.variant, r.seed, f"{r.runtime_s:.3f}"])
    for r in rows:
        save_checkpoint(out / f"model_{r.variant}.json", r.result.params, r.result.model, r.result.scaler, _ckpt_extra(cfg, r.result))
    from .plotting import comparison_bars

    comparison_bars(out / "comparison.png", table)
    for t in table:
        print(f"{t['variant']:8s} minADE_6={t['minADE_6']:.4f} minFDE_6={t['minFDE_6']:.4f}")
    return EXIT_OK


INSPECT_COLUMNS = (
    "k",
    *(f"raw_{n}" for n in FEATURES),
    *(f"std_{n}" for n in FEATURES),
    "u",
    "z",
    "s",
    "pi",
    "top_rank",
)


def inspect_table(example, ck) -> tuple[list[dict], np.ndarray]:
    pred = predict(ck.params, ck.model, [example], ck.scaler, threads=1)
    std = ck.scaler.transform(example.raw_features)
    K = example.goals.shape[0]
    if ck.model.uses_dcm:
        u, z = pred.utilities[0], pred.neural_scores[0]
        dist = goal_probabilities(u, z)
        top = list(pred.top_goals[0])
        s, pi = dist.scores, dist.probs
    else:
        u = z = s = pi = np.full(K, np.nan)
        top = []
    rows = []
    for k in range(K):
        r = {"k": k}
        r.update({f"raw_{n}": float(example.raw_features[k, i]) for i, n in enumerate(FEATURES)})
        r.update({f"std_{n}": float(std[k, i]) for i, n in enumerate(FEATURES)})
        r.update({"u": float(u[k]), "z": float(z[k]), "s": float(s[k]), "pi": float(pi[k])})
        r["top_rank"] = top.index(k) + 1 if k in top else ""
        rows.append(r)
    return rows, pred


def cmd_inspect(cfg: RunConfig, args) -> int:
    ck = _load_ckpt(cfg)
    scenes = _scenes(cfg)
    match = [s for s in scenes if s.id == args.scene_id]
    if not match:
        raise DataError(f"unknown scene id {args.scene_id!r}")
    example = build_example(match[0], cfg.pipeline)
    rows, pred = inspect_table(example, ck)
    out = _out_dir(cfg)
    stem = f"inspect_{args.scene_id}"
    write_metric_csv(out / f"{stem}.csv", rows, header_lines(cfg, "inspect"))
    lines = [f"scene {args.scene_id}  variant {ck.model.variant}  maxl {example.maxl:.3f} m"]
    if ck.model.uses_dcm:
        beta = ck.params["dcm.beta"].data
        lines.append("beta: " + ", ".join(f"{n}={b:+.4f}" for n, b in zip(ck.model.features, beta)))
    lines.append(f"{'k':>3} {'x':>8} {'y':>8} {'dir':>8} {'occ':>5} {'coll':>7} {'dangle':>8} {'ddist':>9} {'u':>9} {'z':>9} {'pi':>7}  top")
    for r in rows:
        x, y = example.goals[r["k"]]
        lines.append(
            f"{r['k']:>3} {x:8.2f} {y:8.2f} {r['raw_dir']:8.2f} {r['raw_occ']:5.0f} {r['raw_coll']:7.4f} "
            f"{r['raw_dangle']:8.2f} {r['raw_ddist']:9.2f} {r['u']:9.4f} {r['z']:9.4f} {r['pi']:7.4f}  {r['top_rank']}"
        )
    if ck.model.uses_dcm:
        lines.append(f"sum pi = {sum(r['pi'] for r in rows):.12f}")
    text = "\n".join(lines) + "\n"
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    from .plotting import scene_explanation

    probs = np.array([r["pi"] for r in rows])
    top = pred.top_goals[0] if pred.top_goals is not None else np.array([], dtype=int)
    scene_explanation(out / f"{stem}.png", example, np.nan_to_num(probs), top, pred.mu[0], pred.mode_probs[0], f"{args.scene_id} ({ck.model.variant})")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "fit-dcm": cmd_fit_dcm,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--scenes", metavar="PATH")
    common.add_argument("--checkpoint", metavar="PATH")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="waydcm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"waydcm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("generate", parents=[common], help="write a synthetic corpus")
    sub.add_parser("fit-dcm", parents=[common], help="fit logit coefficients on a corpus")
    sub.add_parser("train", parents=[common], help="train one model variant")
    sub.add_parser("eval", parents=[common], help="minADE/minFDE of a checkpoint")
    sub.add_parser("compare", parents=[common], help="train and score all four variants")
    ins = sub.add_parser("inspect", parents=[common], help="per-alternative explanation of one scene")
    ins.add_argument("scene_id")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(seed=args.seed, variant=args.variant, scenes=args.scenes, out=args.out, checkpoint=args.checkpoint)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SceneError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
