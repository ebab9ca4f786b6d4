"""Command-line entry point.

Subcommands: gen-data, fuse, train, eval, bench, ablate, gradcheck.
Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
Every subcommand is deterministic given its config and seed (bench rows
contain wall-clock numbers, everything else is bit-reproducible).
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import checksuite, config as cfgmod
from .data import (
    DatasetManifest,
    generate_phantom_dataset,
    load_split,
    load_volume,
    split_dataset,
    write_pgm,
)
from .errors import ConfigError, VolfuseError
from .metrics import evaluate
from .models import attention_maps, build_model, forward, svm_head
from .optim import (
    AdamState,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    predict_probs,
    train,
    train_epoch,
    write_curve,
)
from .rankpool import (
    RankSolverConfig,
    SliceSequence,
    approx_rank_pool,
    chunked_fuse,
    maxpool_fuse,
    ranksvm_objective,
    ranksvm_solve,
    smooth_sequence,
)

ABLATION_ROWS = (
    "post_fusion_a",
    "post_fusion_b",
    "pre_fusion",
    "post_fusion_no_cbam",
    "post_fusion_maxpool",
    "post_fusion_svm",
)


def _cmd_gen_data(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    phantom = cfgmod.phantom_config(cfg)
    out_dir = Path(args.out_dir)
    try:
        manifest = generate_phantom_dataset(phantom, out_dir, threads=args.threads)
    except OSError as e:
        print(f"error: cannot write dataset under {out_dir}: {e}", file=sys.stderr)
        return 1
    manifest = split_dataset(manifest, cfg["split"]["ratio"], cfg["split"]["seed"])
    manifest_path = out_dir / "manifest.json"
    manifest.save(manifest_path)
    print(manifest_path)
    return 0


def _parse_fuse_method(text: str):
    if text in ("exact", "approx", "max"):
        return text, None
    if text.startswith("chunked:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad chunk size in method {text!r}")
        if k < 1:
            raise ConfigError(f"chunk size must be >= 1 in method {text!r}")
        return "chunked", k
    raise ConfigError(
        f"unknown fuse method {text!r}; expected exact, approx, chunked:k or max"
    )


def _cmd_fuse(args) -> int:
    method, k = _parse_fuse_method(args.method)
    cfg = cfgmod.load_run_config(args.config)
    rec = load_volume(Path(args.input).with_suffix(""))
    seq = SliceSequence.from_stack(rec.data.astype(np.float64))

    if method == "approx":
        img = approx_rank_pool(seq).value
    elif method == "max":
        img = maxpool_fuse(seq).value
    elif method == "chunked":
        # two-stage: fuse chunks of k slices, then fuse the chunk images
        img = approx_rank_pool(chunked_fuse(seq, k)).value
    else:  # exact
        solver = cfgmod.solver_config(cfg)
        dyn = ranksvm_solve(seq, solver)
        objective = ranksvm_objective(dyn.value, smooth_sequence(seq), solver)
        print(f"objective {objective:.10g}")
        img = dyn.value
    write_pgm(img, args.out)
    print(args.out)
    return 0


def _load_splits(manifest_path):
    train_vols, train_labels = load_split(manifest_path, "train")
    test_vols, test_labels = load_split(manifest_path, "test")
    return train_vols, train_labels, test_vols, test_labels


def _cmd_train(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    tcfg = cfgmod.train_config(cfg)
    train_vols, train_labels, test_vols, test_labels = _load_splits(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = train(tcfg, train_vols, train_labels, test_vols, test_labels)
    write_curve(result.curve, out_dir / "curve.csv")
    checkpoint_save(result.model, out_dir / "checkpoint_final",
                    epoch=tcfg.epochs,
                    metrics={"eval_loss": result.curve[-1][2]})
    checkpoint_save(result.model, out_dir / "checkpoint_best",
                    epoch=result.best_epoch,
                    metrics={"eval_loss": result.best_eval_loss},
                    params_override=result.best_params)
    print(f"best epoch {result.best_epoch} eval_loss {result.best_eval_loss:.6f}")
    print(out_dir / "curve.csv")
    return 0


def _cmd_eval(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    model, _manifest = checkpoint_load(args.checkpoint)
    test_vols, test_labels = load_split(args.manifest, "test")
    probs = predict_probs(model, test_vols, batch_size=cfg["train"]["batch_size"])
    result = evaluate(test_labels, probs).to_json_dict()
    text = json.dumps(result, sort_keys=True, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.dump_attention:
        dump_dir = Path(args.dump_attention)
        dump_dir.mkdir(parents=True, exist_ok=True)
        first = np.stack([test_vols[0]])[:, None].astype(model.dtype)
        mc, ms = attention_maps(model, first)
        write_pgm(mc[0].reshape(1, -1), dump_dir / "attention_channel.pgm")
        write_pgm(ms[0], dump_dir / "attention_spatial.pgm")
        print(dump_dir / "attention_spatial.pgm")
    return 0


def _cmd_bench(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("bench needs at least one variant")
    train_vols, train_labels, _test_vols, _test_labels = _load_splits(args.manifest)
    rows = []
    for variant in variants:
        mdoc = dict(cfg["model"])
        mdoc["variant"] = variant
        if variant == "conv3d_baseline":
            mdoc["use_cbam"] = False
        vcfg = dict(cfg)
        vcfg["model"] = mdoc
        tcfg = cfgmod.train_config(vcfg)
        model = build_model(tcfg.model, tcfg.seed, dtype=tcfg.dtype)
        state = AdamState(model, lr=tcfg.lr)
        train_epoch(model, state, tcfg, train_vols, train_labels, epoch=0)  # warm-up
        times = []
        for epoch in range(1, args.epochs + 1):
            t0 = time.perf_counter()
            train_epoch(model, state, tcfg, train_vols, train_labels, epoch)
            times.append(time.perf_counter() - t0)
        rows.append((variant, statistics.median(times)))
    lines = ["variant,median_s_per_epoch"]
    for variant, median in rows:
        lines.append(f"{variant},{median:.6f}")
        print(f"{variant}: {median:.3f} s/epoch")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return 0


def _ablation_model_doc(row: str, base: dict) -> dict:
    doc = dict(base)
    doc.update(
        {
            "post_fusion_a": {"variant": "post_fusion_a"},
            "post_fusion_b": {"variant": "post_fusion_b"},
            "pre_fusion": {"variant": "pre_fusion"},
            "post_fusion_no_cbam": {"variant": "post_fusion_a", "use_cbam": False},
            "post_fusion_maxpool": {"variant": "post_fusion_a", "fusion": "max"},
            "post_fusion_svm": {"variant": "post_fusion_a"},
        }[row]
    )
    return doc


def _cmd_ablate(args) -> int:
    cfg = cfgmod.load_run_config(args.config)
    if args.epochs is not None:
        cfg["train"]["epochs"] = args.epochs
    train_vols, train_labels, test_vols, test_labels = _load_splits(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for seed_offset in range(args.seeds):
        seed = cfg["train"]["seed"] + seed_offset
        post_a_model = None
        for row in ABLATION_ROWS:
            vcfg = dict(cfg)
            vcfg["model"] = _ablation_model_doc(row, cfg["model"])
            vcfg["train"] = dict(cfg["train"], seed=seed)
            tcfg = cfgmod.train_config(vcfg)
            if row == "post_fusion_svm":
                # reuses the trained post_fusion_a feature extractor
                feats_tr = _features(post_a_model, train_vols)
                feats_te = _features(post_a_model, test_vols)
                head = svm_head(feats_tr, train_labels)
                probs = head.scores01(feats_te)
            else:
                result = train(tcfg, train_vols, train_labels, test_vols, test_labels)
                if row == "post_fusion_a":
                    post_a_model = result.model
                probs = predict_probs(result.model, test_vols, tcfg.batch_size)
            res = evaluate(test_labels, probs)
            records.append((row, seed, res))
            print(f"{row} seed={seed} acc={res.acc:.3f} auc={res.auc:.3f}")

    lines = ["variant,seed,acc,auc,f1,precision,recall,ap"]
    for row, seed, res in records:
        lines.append(
            f"{row},{seed},{res.acc:.6f},{res.auc:.6f},{res.f1:.6f},"
            f"{res.precision:.6f},{res.recall:.6f},{res.ap:.6f}"
        )
    table_path = out_dir / "ablation.csv"
    table_path.write_text("\n".join(lines) + "\n")
    _write_ablation_report(records, out_dir / "report.md")
    print(table_path)
    return 0


def _features(model, volumes) -> np.ndarray:
    out = []
    for lo in range(0, len(volumes), 16):
        batch = np.stack(volumes[lo : lo + 16])[:, None].astype(model.dtype)
        _, pooled = forward(model, batch, return_features=True)
        out.append(pooled.data)
    return np.concatenate(out)


def _write_ablation_report(records, path) -> None:
    by_row: dict[str, list] = {}
    for row, _seed, res in records:
        by_row.setdefault(row, []).append(res)
    means = {row: float(np.mean([r.acc for r in rs])) for row, rs in by_row.items()}
    lines = ["# Ablation summary", "", "| variant | mean acc | mean auc | mean f1 |",
             "|---|---|---|---|"]
    for row in ABLATION_ROWS:
        rs = by_row.get(row, [])
        if not rs:
            continue
        lines.append(
            f"| {row} | {np.mean([r.acc for r in rs]):.3f} "
            f"| {np.mean([r.auc for r in rs]):.3f} "
            f"| {np.mean([r.f1 for r in rs]):.3f} |"
        )
    lines.append("")
    base = means.get("post_fusion_a")
    if base is not None:
        lines.append("Directional effects relative to post_fusion_a (mean accuracy):")
        for row in ABLATION_ROWS[1:]:
            if row in means:
                sign = "below" if means[row] < base else "at or above"
                lines.append(f"- {row}: {means[row]:.3f} ({sign} {base:.3f})")
    Path(path).write_text("\n".join(lines) + "\n")


def _cmd_gradcheck(args) -> int:
    rows = checksuite.run_suite(seeds=range(args.seeds))
    worst_row = max(rows, key=lambda r: r.worst / r.threshold)
    failed = [r for r in rows if not r.ok]
    for r in rows:
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.kind:8s} {r.name:32s} rel_err {r.worst:.3e} "
              f"(threshold {r.threshold:.0e}) {status}")
    print(f"worst offender: {worst_row.name} rel_err {worst_row.worst:.3e}")
    if failed:
        print(f"FAILED: {len(failed)} of {len(rows)} checks", file=sys.stderr)
        return 1
    print(f"all {len(rows)} checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volfuse",
        description="Rank-pooling fusion + CBAM classification for 3D volumes",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for data generation (results are "
                             "bit-identical for any value)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the phantom dataset + manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("fuse", help="fuse one volume into a 2D PGM image")
    p.add_argument("--config", default=None)
    p.add_argument("--input", required=True, help="path to a .vol file")
    p.add_argument("--method", required=True,
                   help="exact | approx | chunked:k | max")
    p.add_argument("--out", required=True, help="output .pgm path")
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("train", help="train a variant; writes curve + checkpoints")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint stem (no suffix)")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--dump-attention", default=None,
                   help="directory for attention-map PGMs")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="median wall-clock seconds per epoch per variant")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--variants",
                   default="post_fusion_b,post_fusion_a,conv3d_baseline")
    p.add_argument("--epochs", type=int, default=3, help="timed epochs after warm-up")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("ablate", help="metrics table over the benchmark row structure")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference suite over ops + variants")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (VolfuseError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
