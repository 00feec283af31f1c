"""Command-line pipeline: dataset generation, training, evaluation, rollouts,
serving, speed benchmarking, and the data/width scaling sweep.

Every command that produces an artifact directory drops a run.json manifest
(command, code version, seed, and the relevant config hashes) so results can
be traced back to their inputs.
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import tokenizer as tk
from .envs import DOMAINS, generate_dataset, load_dataset, make_env, render
from .metrics import delta_psnr, episode_2hz, evaluate, perplexity, psnr, \
    random_chunks
from .model import DynamicsModel, ModelConfig, checkpoint_hash, config_hash, \
    load_checkpoint, read_header
from .sampling import rollout
from .training import MODES, TrainConfig, DomainData, prepare_dataset_dir, \
    train_loop


def _write_run_manifest(out_dir, command, seed, **extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "code_version": __version__, "seed": seed,
                "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())}
    manifest.update(extra)
    (out_dir / "run.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _parse_skill_mix(text):
    mix = {}
    for part in text.split(","):
        skill, _, weight = part.partition(":")
        if not weight:
            raise ValueError(
                f"bad skill mix entry {part!r}, expected skill:weight")
        mix[float(skill)] = float(weight)
    return mix


def _take(dd, n):
    if n is None or n >= dd.n_episodes:
        return dd
    return DomainData(dd.spec, dd.tokens[:n], dd.chunks[:n],
                      None if dd.frames is None else dd.frames[:n], dd.source)


def _load_train_data(paths, codebook, episodes=None, keep_frames=False):
    data = {}
    for p in paths:
        dd = _take(prepare_dataset_dir(p, codebook, keep_frames=keep_frames),
                   episodes)
        if dd.spec.id in data:
            raise ValueError(f"domain {dd.spec.id} given twice")
        data[dd.spec.id] = dd
    return data


def _train_config(args):
    if args.config:
        cfg = TrainConfig.from_flat_text(Path(args.config).read_text())
    else:
        cfg = TrainConfig()
    overrides = {"seed": args.seed}
    for name in ("iterations", "batch_size", "lr"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "mode", None):
        overrides["mode_probs"] = ((args.mode, 1.0),)
    return dataclasses.replace(cfg, **overrides)


def cmd_gen_data(args):
    mix = _parse_skill_mix(args.skill)
    out = Path(args.out)
    generate_dataset(args.domain, args.episodes, args.steps, mix, args.seed,
                     out)
    _write_run_manifest(out, "gen-data", args.seed, domain=args.domain,
                        episodes=args.episodes, steps=args.steps,
                        skill=args.skill)
    print(f"wrote {args.episodes} episodes of domain {args.domain} to {out}")
    return 0


def cmd_train(args):
    codebook = tk.default_codebook()
    data = _load_train_data(args.data, codebook, args.episodes,
                            keep_frames=args.objective == "soft")
    tcfg = _train_config(args)
    mcfg = ModelConfig(
        vocab=codebook.size,
        domain_chunk_dims=tuple(sorted(
            (i, dd.spec.chunk_dim) for i, dd in data.items())),
        dim=args.dim, n_blocks=args.blocks, n_heads=args.heads,
        conditioning=args.conditioning, objective=args.objective)
    model = DynamicsModel(mcfg)
    out = Path(args.out)
    t0 = time.perf_counter()
    result = train_loop(model, data, tcfg, out,
                        meta={"datasets": [str(p) for p in args.data]})
    wall = time.perf_counter() - t0
    _write_run_manifest(
        out, "train", args.seed, config_hash=config_hash(mcfg),
        checkpoint=str(result.checkpoint),
        checkpoint_hash=checkpoint_hash(result.checkpoint),
        iterations=result.iterations, wall_time_s=round(wall, 3),
        datasets=[str(p) for p in args.data])
    last = result.metrics[-1]
    print(f"trained {result.iterations} iterations in {wall:.1f}s, "
          f"final loss {last['loss']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def _check_eval_flags(args, header):
    if args.config_hash and args.config_hash != header["config_hash"]:
        raise ValueError(
            f"checkpoint config hash {header['config_hash']} does not match "
            f"--config-hash {args.config_hash}")
    cfg = header["config"]
    for flag, key in (("objective", "objective"),
                      ("conditioning", "conditioning"), ("dim", "dim")):
        want = getattr(args, flag, None)
        if want is not None and want != cfg[key]:
            raise ValueError(
                f"checkpoint has {key}={cfg[key]!r}, flags ask for {want!r}")


def cmd_eval(args):
    header = read_header(args.ckpt)
    _check_eval_flags(args, header)
    model, _ = load_checkpoint(args.ckpt)
    codebook = tk.default_codebook()
    datasets = {}
    for p in args.data:
        spec, episodes = load_dataset(p)
        datasets[spec.name] = (spec, episodes)
    report = evaluate(model, codebook, datasets, n_episodes=args.episodes,
                      k_random=args.k, sigma_scale=args.sigma,
                      n_windows=args.windows, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "summary.txt").write_text(report.summary_table())
    _write_run_manifest(out, "eval", args.seed,
                        config_hash=header["config_hash"],
                        checkpoint=str(args.ckpt),
                        datasets=[str(p) for p in args.data])
    print(report.summary_table(), end="")
    return 0


def cmd_rollout(args):
    model, _ = load_checkpoint(args.ckpt)
    codebook = tk.default_codebook()
    spec, episodes = load_dataset(args.data)
    if not 0 <= args.episode < len(episodes):
        raise ValueError(f"episode {args.episode} out of range "
                         f"(dataset has {len(episodes)})")
    ep = episodes[args.episode]
    frames, chunks = episode_2hz(spec, ep)
    prompt = model.cfg.prompt_frames
    available = len(chunks) - (prompt - 1)
    steps = available if args.steps is None else args.steps
    if not 0 < steps <= available:
        raise ValueError(f"episode supports at most {available} steps")
    actions = chunks[prompt - 1:prompt - 1 + steps]
    generated = rollout(model, codebook, frames[:prompt], actions, spec.id,
                        prompt_chunks=chunks[:prompt - 1], seed=args.seed,
                        greedy=True)
    oracle = frames[prompt:prompt + steps]
    curve = np.array([psnr(g, o) for g, o in zip(generated, oracle)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"command": "rollout", "code_version": __version__,
            "seed": args.seed, "checkpoint": str(args.ckpt),
            "dataset": str(args.data), "episode": args.episode}
    np.savez(out, generated=generated, oracle=oracle,
             prompt=frames[:prompt], actions=actions, psnr=curve,
             meta=json.dumps(meta, sort_keys=True))
    print(f"rolled out {steps} frames, mean PSNR {curve.mean():.2f} dB -> "
          f"{out}")
    return 0


def cmd_serve(args):
    import uvicorn

    from .serve import create_app

    model, _ = load_checkpoint(args.ckpt)
    codebook = tk.default_codebook() if model.cfg.objective == "discrete" \
        else None
    app = create_app(model, codebook, max_sessions=args.max_sessions,
                     idle_timeout=args.idle_timeout)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def _bench_one(objective, codebook, args):
    torch.manual_seed(args.seed)
    spec = DOMAINS[args.domain]
    cfg = ModelConfig(vocab=codebook.size,
                      domain_chunk_dims=((args.domain, spec.chunk_dim),),
                      dim=args.dim, n_blocks=args.blocks,
                      objective=objective)
    model = DynamicsModel(cfg).eval()
    f0 = render(make_env(args.domain, args.seed))
    actions = random_chunks(spec, args.frames,
                            np.random.default_rng(args.seed))
    prompt = np.stack([f0] * cfg.prompt_frames)
    rollout(model, codebook, prompt, actions[:1], args.domain, greedy=True,
            m_passes=args.m_passes, n_test=args.n_test)  # warm caches
    model.reset_counters()
    t0 = time.perf_counter()
    rollout(model, codebook, prompt, actions, args.domain, seed=args.seed,
            greedy=True, m_passes=args.m_passes, n_test=args.n_test)
    wall = time.perf_counter() - t0
    return {"head": objective, "fps": args.frames / wall,
            "ms_per_frame": 1000.0 * wall / args.frames,
            "trunk_passes": model.trunk_passes,
            "head_evals": model.head_evals}


def cmd_bench(args):
    codebook = tk.default_codebook()
    rows = [_bench_one(obj, codebook, args) for obj in ("discrete", "soft")]
    lines = ["head,fps,ms_per_frame,trunk_passes,head_evals"]
    for r in rows:
        lines.append(f"{r['head']},{r['fps']:.2f},{r['ms_per_frame']:.1f},"
                     f"{r['trunk_passes']},{r['head_evals']}")
    lines.append(f"speedup,{rows[0]['fps'] / rows[1]['fps']:.2f},,,")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.txt").write_text(text)
        _write_run_manifest(out, "bench", args.seed, frames=args.frames,
                            m_passes=args.m_passes, n_test=args.n_test,
                            dim=args.dim, blocks=args.blocks, rows=rows)
    return 0


def _int_list(text):
    return [int(v) for v in text.split(",")]


def cmd_scaling_sweep(args):
    codebook = tk.default_codebook()
    n_domains = _int_list(args.n_domains)
    episode_counts = _int_list(args.episodes)
    dims = _int_list(args.dims)
    seeds = _int_list(args.seeds)
    if max(n_domains) > len(args.data):
        raise ValueError(f"grid needs {max(n_domains)} datasets, "
                         f"got {len(args.data)}")
    full = [prepare_dataset_dir(p, codebook) for p in args.data]
    if max(episode_counts) > min(dd.n_episodes for dd in full):
        raise ValueError("a dataset has fewer episodes than the grid asks")
    eval_spec, eval_eps = load_dataset(args.eval_data)
    if eval_spec.id != full[0].spec.id:
        raise ValueError("--eval-data must hold out the first domain")
    eval_dd = prepare_dataset_dir(args.eval_data, codebook)

    out = Path(args.out)
    cells = [{"n_domains": nd, "episodes": ep, "dim": d, "seed": s,
              "dir": f"cells/nd{nd}_ep{ep:04d}_d{d:03d}_s{s}",
              "status": "pending"}
             for nd in n_domains for ep in episode_counts for d in dims
             for s in seeds]
    grid = {"iterations": args.iterations, "blocks": args.blocks,
            "mode": args.mode or "mixed",
            "datasets": [str(p) for p in args.data],
            "eval_data": str(args.eval_data), "cells": cells}

    def save_grid():
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.json").write_text(json.dumps(grid, indent=1,
                                                  sort_keys=True))

    save_grid()
    columns = ["n_domains", "episodes", "dim", "seed", "iterations",
               "perplexity", "delta_psnr", "wall_s"]
    rows = []

    def save_results():
        lines = [",".join(columns)]
        lines += [",".join(str(r[c]) for c in columns) for r in rows]
        (out / "results.csv").write_text("\n".join(lines) + "\n")

    save_results()
    t_start = time.perf_counter()
    partial = False
    for cell in cells:
        if args.budget_s and time.perf_counter() - t_start > args.budget_s:
            partial = True
            cell["status"] = "skipped"
            continue
        data = {dd.spec.id: _take(dd, cell["episodes"])
                for dd in full[:cell["n_domains"]]}
        mcfg = ModelConfig(
            vocab=codebook.size,
            domain_chunk_dims=tuple(sorted(
                (i, dd.spec.chunk_dim) for i, dd in data.items())),
            dim=cell["dim"], n_blocks=args.blocks)
        model = DynamicsModel(mcfg)
        kw = dict(iterations=args.iterations, batch_size=args.batch_size,
                  seed=cell["seed"])
        if args.mode:
            kw["mode_probs"] = ((args.mode, 1.0),)
        tcfg = TrainConfig(**kw)
        t0 = time.perf_counter()
        train_loop(model, data, tcfg, out / cell["dir"])
        model.eval()
        ppl = perplexity(model, eval_dd, n_windows=args.eval_windows,
                         seed=cell["seed"])
        deltas = [delta_psnr(model, codebook, eval_spec, ep, k=args.k,
                             seed=cell["seed"])
                  for ep in eval_eps[:args.eval_episodes]]
        wall = time.perf_counter() - t0
        row = dict(cell, iterations=args.iterations,
                   perplexity=round(ppl, 4),
                   delta_psnr=round(float(np.mean(deltas)), 4),
                   wall_s=round(wall, 1))
        rows.append(row)
        cell["status"] = "done"
        save_grid()
        save_results()
        print(",".join(str(row[c]) for c in columns))
    save_grid()
    _write_run_manifest(out, "scaling-sweep", seeds[0],
                        cells_done=sum(c["status"] == "done" for c in cells),
                        cells_total=len(cells))
    if partial:
        print("budget exhausted: remaining cells skipped, results are "
              "partial", file=sys.stderr)
        return 3
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="masksim",
        description="action-steerable video dynamics over synthetic worlds")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate an oracle dataset")
    g.add_argument("--domain", type=int, required=True)
    g.add_argument("--episodes", type=int, default=64)
    g.add_argument("--steps", type=int, default=56,
                   help="native timesteps per episode")
    g.add_argument("--skill", default="1.0:1.0",
                   help="skill mix, e.g. 1.0:0.5,0.3:0.5")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a dynamics model")
    t.add_argument("--data", action="append", required=True,
                   help="dataset directory (repeat per domain)")
    t.add_argument("--episodes", type=int, default=None,
                   help="use only the first N episodes of each dataset")
    t.add_argument("--config", default=None, help="flat training config file")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--mode", choices=MODES, default=None,
                   help="train on a single masking mode")
    t.add_argument("--objective", choices=("discrete", "soft"),
                   default="discrete")
    t.add_argument("--conditioning",
                   choices=("modulation", "concat", "add", "xattn"),
                   default="modulation")
    t.add_argument("--dim", type=int, default=128)
    t.add_argument("--blocks", type=int, default=8)
    t.add_argument("--heads", type=int, default=4)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="metrics report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", action="append", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--episodes", type=int, default=4)
    e.add_argument("--k", type=int, default=5)
    e.add_argument("--sigma", type=float, default=0.1)
    e.add_argument("--windows", type=int, default=32)
    e.add_argument("--config-hash", default=None,
                   help="refuse the checkpoint unless its config hash matches")
    e.add_argument("--objective", choices=("discrete", "soft"), default=None)
    e.add_argument("--conditioning",
                   choices=("modulation", "concat", "add", "xattn"),
                   default=None)
    e.add_argument("--dim", type=int, default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("rollout", help="replay one episode through the model")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--episode", type=int, default=0)
    r.add_argument("--steps", type=int, default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True, help="output .npz path")
    r.set_defaults(func=cmd_rollout)

    s = sub.add_parser("serve", help="run the interactive session service")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8800)
    s.add_argument("--max-sessions", type=int, default=64)
    s.add_argument("--idle-timeout", type=float, default=600.0)
    s.set_defaults(func=cmd_serve)

    b = sub.add_parser("bench", help="decode speed for both heads")
    b.add_argument("--domain", type=int, default=0)
    b.add_argument("--frames", type=int, default=16)
    b.add_argument("--m-passes", type=int, default=2)
    b.add_argument("--n-test", type=int, default=100)
    b.add_argument("--dim", type=int, default=128)
    b.add_argument("--blocks", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None)
    b.set_defaults(func=cmd_bench)

    w = sub.add_parser("scaling-sweep",
                       help="train a grid over domains, episodes, and width")
    w.add_argument("--data", action="append", required=True,
                   help="training dataset directories, priority order")
    w.add_argument("--eval-data", required=True,
                   help="held-out dataset of the first domain")
    w.add_argument("--n-domains", default="1,2,3")
    w.add_argument("--episodes", default="32,128,512")
    w.add_argument("--dims", default="64,128")
    w.add_argument("--seeds", default="0,1")
    w.add_argument("--iterations", type=int, default=1000)
    w.add_argument("--batch-size", type=int, default=8)
    w.add_argument("--blocks", type=int, default=8)
    w.add_argument("--mode", choices=["forward", "passive", "full", "policy"],
                   help="train every cell on one masking mode only")
    w.add_argument("--eval-windows", type=int, default=16)
    w.add_argument("--eval-episodes", type=int, default=4)
    w.add_argument("--k", type=int, default=3)
    w.add_argument("--budget-s", type=float, default=0.0,
                   help="wall-clock budget; skip remaining cells when spent")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_scaling_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, IndexError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
