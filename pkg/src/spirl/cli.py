"""Command-line entry point: ``spirl <command> ...``.

Exit codes: 0 success, 2 usage error, 3 I/O or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .agent import SaliencyPipeline, evaluate, load_policy, policy_attention, train
from .agent.learner import REGIMES
from .config import ConfigError, RunConfig, load_config, write_resolved
from .dataset import DatasetError, load_frames, read_frames_raw, write_frames
from .env import AtariStyleWrapper, Env, EnvError, SpritesEnv, collect_frames, external_env
from .images import attention_overlay, heatmap, selection_overlay, to_uint8, write_ppm
from .mae import MAE, PROBE_MODES, denormalize, normalize_patch, patchify, unpatchify
from .pretrain import load_model, pretrain
from .saliency import MR_GRID_PCT, budget_size, dynamic_k_select, error_map, error_maps, estimate_mr, salient_counts
from .snapshot import SnapshotError
from .tensor import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("spirl")


class UsageError(Exception):
    pass


# -- helpers --------------------------------------------------------------


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "preset", "full"))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def make_env(cfg: RunConfig) -> Env:
    if cfg.env.name == "external":
        raw = external_env(cfg.env.endpoint)
    else:
        raw = SpritesEnv(cfg.env.sprites)
    return AtariStyleWrapper(raw, cfg.env.wrapper)


def _outdir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _mae_manifest(ckpt: Path) -> dict:
    return json.loads(ckpt.with_suffix(".json").read_text())


def _resolve_ckpt(path: str) -> Path:
    """A snapshot file, or a pre-training directory (its newest epoch)."""
    p = Path(path)
    if p.is_dir():
        snaps = sorted(p.glob("epoch_*.spnt"))
        if not snaps:
            raise FileNotFoundError(f"no epoch_*.spnt checkpoints in {p}")
        return snaps[-1]
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {p} not found")
    return p


def _pipeline(cfg: RunConfig, mae: MAE, **overrides) -> SaliencyPipeline:
    sal = replace(cfg.saliency, **{k: v for k, v in overrides.items() if k in ("knee_rule", "mr_pct", "pad_mode", "fixed_k")})
    return SaliencyPipeline(mae, sal.knee_rule, sal.mr_pct, sal.fixed_k, sal.pad_mode)


def _frame_at(data: str, idx: int) -> np.ndarray:
    raw = read_frames_raw(data)
    if not 0 <= idx < raw.shape[0]:
        raise UsageError(f"frame index {idx} outside [0, {raw.shape[0]})")
    return raw[idx]


# -- commands -------------------------------------------------------------


def cmd_collect(args) -> int:
    cfg = _config(args)
    if args.env != cfg.env.name:
        cfg = replace(cfg, env=replace(cfg.env, name=args.env))
    out = Path(args.out)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"output directory {out.parent} does not exist")
    env = make_env(cfg)
    try:
        frames = collect_frames(env, args.frames, cfg.seed)
    finally:
        env.close()
    write_frames(out, frames)
    write_resolved(cfg, out.parent, {"command": "collect", "frames": args.frames, "out": str(out)})
    print(f"wrote {frames.shape[0]} frames to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    frames = load_frames(args.data)
    out = _outdir(args.out)
    write_resolved(cfg, out, {"command": "pretrain", "data": args.data})
    result = pretrain(frames, cfg.mae, cfg.schedule, seed=cfg.seed, out=out, resume=args.resume, max_epochs=args.epochs)
    counts = result.model.parameter_counts()
    print(f"trainable scalars: {counts['total']} (encoder {counts['encoder']}, decoder {counts['decoder']}, tokens {counts['tokens']})")
    print(f"final loss {result.epoch_losses[-1]:.6f} after {len(result.epoch_losses)} epochs")
    return EXIT_OK


def cmd_saliency(args) -> int:
    cfg = _config(args)
    ckpt = _resolve_ckpt(args.ckpt)
    mae = load_model(ckpt)
    manifest = _mae_manifest(ckpt)
    fs = mae.config.frame
    raw = _frame_at(args.data, args.frame)
    frame = raw.astype(np.float32) / np.float32(255.0)
    out = _outdir(args.out)
    write_resolved(cfg, out, {"command": "saliency", "ckpt": str(ckpt), "frame": args.frame})

    errors = error_map(frame, mae)
    sel = dynamic_k_select(errors, cfg.saliency.knee_rule)
    write_ppm(out / "heatmap.ppm", heatmap(errors, fs.p))
    write_ppm(out / "selection.ppm", selection_overlay(raw, sel.indices, fs.p))
    with open(out / "errors.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in errors])

    mean = np.asarray(manifest["channel_mean"])
    std = np.asarray(manifest["channel_std"])
    for mode in PROBE_MODES:
        pred = mae.decoder_probe(mode)
        write_ppm(out / f"probe_{mode}.ppm", to_uint8(unpatchify(denormalize(pred, mean, std, fs.c), fs.p, fs.c)))
    # surroundings-only reconstructions mapped back with each patch's own statistics
    recon = mae.reconstruct_all_from_surroundings(frame)[0].astype(np.float64)
    _, mu, sd = normalize_patch(patchify(frame.astype(np.float64), fs.p))
    pix = recon * (sd + 1e-6) + mu
    write_ppm(out / "surroundings.ppm", to_uint8(unpatchify(np.clip(pix, 0, 1), fs.p, fs.c)))
    print(f"K_t={sel.k} p*={sel.p_star:.4f} rule={sel.rule}")
    return EXIT_OK


def cmd_mr_estimate(args) -> int:
    cfg = _config(args)
    ckpt = _resolve_ckpt(args.ckpt)
    mae = load_model(ckpt)
    frames = load_frames(args.data)
    if args.limit:
        frames = frames[: args.limit]
    out = _outdir(args.out)
    write_resolved(cfg, out, {"command": "mr-estimate", "ckpt": str(ckpt), "data": args.data})
    maps = np.concatenate([error_maps(frames[i:i + 64], mae) for i in range(0, len(frames), 64)])
    counts = salient_counts(maps, cfg.saliency.knee_rule)
    n = mae.config.frame.n_patches
    mr_star, cands = estimate_mr(counts, n)
    hist = np.bincount(counts, minlength=n + 1)
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["salient_count", "frames"])
        for k, c in enumerate(hist):
            w.writerow([k, int(c)])
    report = {
        "frames": int(counts.size),
        "n_patches": n,
        "mr_star_pct": mr_star,
        "candidates_pct": cands,
        "budget_at_mr_star": budget_size(mr_star, n),
        "coverage_by_pct": {pct: float(np.mean(counts <= budget_size(pct, n))) for pct in MR_GRID_PCT},
    }
    (out / "mr_report.json").write_text(json.dumps(report, indent=2))
    print(f"mr*={mr_star}% candidates={cands} over {counts.size} frames")
    return EXIT_OK


def _apply_regime(cfg: RunConfig, regime: str | None) -> RunConfig:
    if regime is None:
        return cfg
    return replace(cfg, agent=replace(cfg.agent, **REGIMES[regime]))


def _train_one(cfg: RunConfig, mae_ckpt: Path, out: Path) -> dict:
    mae = load_model(mae_ckpt)
    env = make_env(cfg)
    pipe = _pipeline(cfg, mae)
    agent_cfg = replace(cfg.agent, seed=cfg.seed)
    try:
        result = train(env, pipe, agent_cfg, out=out, extra_manifest={"mae_checkpoint": str(mae_ckpt.resolve())})
    finally:
        env.close()
    return {"episodes": len(result.episode_returns), "updates": result.updates, "checkpoints": result.checkpoints}


def cmd_train(args) -> int:
    cfg = _apply_regime(_config(args), args.regime)
    mae_ckpt = _resolve_ckpt(args.ckpt)
    out = _outdir(args.out)
    write_resolved(cfg, out, {"command": "train", "ckpt": str(mae_ckpt), "regime": args.regime})
    summary = _train_one(cfg, mae_ckpt, out)
    print(f"trained {summary['updates']} updates over {summary['episodes']} episodes; final checkpoint {summary['checkpoints'][-1]}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    env = make_env(cfg)
    try:
        if args.random:
            stats = evaluate(env, None, None, args.episodes, seed=cfg.seed)
        else:
            if not args.checkpoint:
                raise UsageError("eval needs --checkpoint (or --random)")
            manifest = json.loads(Path(args.checkpoint).with_suffix(".json").read_text())
            mae = load_model(Path(args.mae) if args.mae else Path(manifest["mae_checkpoint"]))
            pipe = SaliencyPipeline(mae, **manifest["pipeline"])
            policy, _ = load_policy(args.checkpoint, pipe)
            stats = evaluate(env, policy, pipe, args.episodes, cfg.agent.eval_epsilon, seed=cfg.seed)
    finally:
        env.close()
    print(f"mean={stats.mean:.4f} median={stats.median:.4f} std={stats.std:.4f} episodes={len(stats.returns)}")
    if args.out:
        out = _outdir(args.out)
        write_resolved(cfg, out, {"command": "eval", "checkpoint": args.checkpoint, "random": args.random})
        (out / "eval.json").write_text(json.dumps(stats.to_dict(), indent=2))
    return EXIT_OK


ABLATIONS = ("knee_rule", "pad_mode", "pooling", "fixed_k")


def _ablation_variants(what: str, xs: list[float], n_patches: int) -> list[tuple[str, dict]]:
    if what == "knee_rule":
        return [(r, {"knee_rule": r}) for r in ("mean_threshold", "argmin_slope")]
    if what == "pad_mode":
        return [(m, {"pad_mode": m}) for m in ("zero_pad", "trainable_pad", "masked_attention")]
    if what == "pooling":
        return [(p, {"pooling": p}) for p in ("cls", "average")]
    out = [("dynamic", {})]
    for x in xs:
        k = max(1, min(n_patches, int(np.floor(x * n_patches + 0.5))))
        out.append((f"fixed_k:{x:g}", {"fixed_k": k}))
    return out


def _run_variant(cfg: RunConfig, mae_ckpt: str, overrides: dict, seed: int, episodes: int, out: str) -> dict:
    agent = cfg.agent
    if "pooling" in overrides:
        agent = replace(agent, pooling=overrides["pooling"])
    cfg = replace(cfg, seed=seed, agent=replace(agent, seed=seed))
    mae = load_model(mae_ckpt)
    env = make_env(cfg)
    pipe = _pipeline(cfg, mae, **overrides)
    try:
        result = train(env, pipe, cfg.agent, out=out)
        stats = evaluate(env, result.network, pipe, episodes, cfg.agent.eval_epsilon, seed=seed)
    finally:
        env.close()
    return {"mean": stats.mean, "median": stats.median, "std": stats.std}


def cmd_ablate(args) -> int:
    cfg = _config(args)
    mae_ckpt = _resolve_ckpt(args.ckpt)
    out = _outdir(args.out)
    write_resolved(cfg, out, {"command": "ablate", "what": args.what})
    mae_cfg = load_model(mae_ckpt).config
    xs = [float(x) for x in args.x.split(",")] if args.x else [0.1, 0.2, 0.3, 0.5]
    variants = _ablation_variants(args.what, xs, mae_cfg.frame.n_patches)
    seeds = [int(s) for s in args.seeds.split(",")]
    jobs = [(name, ov, s) for name, ov in variants for s in seeds]
    workers = max(1, int(os.environ.get("SPIRL_THREADS", "1")))
    args_list = [(cfg, str(mae_ckpt), ov, s, args.episodes, str(out / f"{name.replace(':', '_')}_seed{s}")) for name, ov, s in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_variant, *zip(*args_list)))
    else:
        results = [_run_variant(*a) for a in args_list]
    table = out / "ablation.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["what", "variant", "seed", "mean_return", "median_return", "std_return"])
        for (name, _, s), r in zip(jobs, results):
            w.writerow([args.what, name, s, repr(r["mean"]), repr(r["median"]), repr(r["std"])])
    print(f"wrote {len(results)} rows to {table}")
    return EXIT_OK


def cmd_attn_viz(args) -> int:
    cfg = _config(args)
    manifest = json.loads(Path(args.checkpoint).with_suffix(".json").read_text())
    mae = load_model(Path(args.mae) if args.mae else Path(manifest["mae_checkpoint"]))
    pipe = SaliencyPipeline(mae, **manifest["pipeline"])
    policy, _ = load_policy(args.checkpoint, pipe)
    if policy.aggregator.config.pooling != "cls":
        raise UsageError("policy attention needs a cls-pooling checkpoint")
    raw = _frame_at(args.data, args.frame)
    out = _outdir(args.out)
    write_resolved(cfg, out, {"command": "attn-viz", "checkpoint": args.checkpoint, "frame": args.frame})
    s = pipe.process(raw).salient
    _, weights = policy.aggregator(s.embeddings, s.positions, return_weights=True)
    slots = policy_attention(weights, args.mass)
    attended = [int(s.positions[i]) for i in slots if s.positions[i] >= 0]
    selected = [int(i) for i in s.positions if i >= 0]
    mass = float(np.asarray(weights)[slots].sum() / np.asarray(weights).sum())
    write_ppm(out / "attention.ppm", attention_overlay(raw, selected, attended, mae.config.frame.p))
    print(f"selected={len(selected)} attended={len(attended)} mass={mass:.4f}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spirl", description="Salient-patch RL pipeline at desk scale.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="YAML or JSON run config")
        p.add_argument("--preset", default="desk", choices=("full", "desk"), help="base configuration (default desk)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("collect", help="record random-policy frames to an SPFR file")
    common(p)
    p.add_argument("--env", default="sprites", choices=("sprites", "external"))
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("pretrain", help="pre-train the masked autoencoder")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--epochs", type=int, help="stop after this many epochs (schedule unchanged)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("saliency", help="error map, selection overlay, probes and reconstruction for one frame")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("mr-estimate", help="salient-count histogram and maximal-ratio estimate")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="use only the first N frames")
    p.set_defaults(func=cmd_mr_estimate)

    p = sub.add_parser("train", help="train the agent on salient-patch sets")
    common(p)
    p.add_argument("--ckpt", required=True, help="pre-trained MAE checkpoint (file or directory)")
    p.add_argument("--out", required=True)
    p.add_argument("--regime", choices=sorted(REGIMES))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained agent")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--mae", help="override the MAE checkpoint recorded in the agent manifest")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--random", action="store_true", help="evaluate the uniform-random policy instead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate selection/padding/pooling variants")
    common(p)
    p.add_argument("--what", required=True, choices=ABLATIONS)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x", help="comma-separated fractions of the patch grid for fixed_k")
    p.add_argument("--seeds", default="0")
    p.add_argument("--episodes", type=int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn-viz", help="overlay the policy-attended patches on a frame")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mae")
    p.add_argument("--data", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--mass", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_viz)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"spirl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"spirl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DatasetError, SnapshotError, EnvError, KeyError, json.JSONDecodeError) as exc:
        print(f"spirl {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
