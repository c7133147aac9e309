"""Command-line entry point: ``awsaug {search,compare-proxies,ablate,schedule,verify,apply}``.

Exit codes: 0 ok, 1 internal failure, 2 user or configuration error,
3 verification ran but found a counterexample.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import augment, oracle, search
from .config import ConfigError, RunConfig, build_data, dumps_config, load_config
from .model import evaluate, load_checkpoint, save_checkpoint
from .policy import PolicyParams, load_policy, mask_top_k, ranked_ops, sample_ops, save_policy, top_ops

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USER = 2
EXIT_FALSIFIED = 3

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

log = logging.getLogger("awsaug")
_HANDLERS: list = []


class UserError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing


def _prepare(args) -> RunConfig:
    cfg = load_config(args.config, args.preset, seed=args.seed, workers=args.workers, out=args.out)
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg))
    handler = logging.FileHandler(os.path.join(cfg.out, "run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    _HANDLERS.append(handler)
    log.info("command %s, config written to %s", args.command, cfg.out)
    return cfg


def _data(cfg: RunConfig):
    try:
        return build_data(cfg.data)
    except (FileNotFoundError, ConfigError):
        raise
    except ValueError as exc:
        raise UserError(f"bad dataset: {exc}") from None


def _load_policy_arg(path: Optional[str]) -> Optional[PolicyParams]:
    if path is None:
        return None
    if not os.path.exists(path):
        raise UserError(f"policy file not found: {path}")
    try:
        return load_policy(path, augment.N_OPS)
    except ValueError as exc:
        raise UserError(f"bad policy file {path}: {exc}") from None


def _print_top(p: PolicyParams, n: int = 10) -> None:
    print(f"top {n} operations:")
    for rank, (k, prob) in enumerate(top_ops(p, n), 1):
        print(f"{rank:3d}  {k:5d}  {augment.op_name(k):40s} {prob:.6f}")


# ---------------------------------------------------------------------------
# commands


def cmd_search(args) -> int:
    cfg = _prepare(args)
    scfg = cfg.search_config()
    data = _data(cfg)
    out = cfg.out
    ckpt_path = os.path.join(out, "omega_share.ckpt")
    state_path = os.path.join(out, "search_state.json")
    arch = scfg.arch_for(data)
    variant = scfg.proxy.variant
    shared = None
    if variant.needs_checkpoint:
        if args.resume and os.path.exists(ckpt_path):
            shared = load_checkpoint(ckpt_path, arch)
        else:
            shared = search.train_shared(scfg, data, augmented=variant is not search.Proxy.P_NF)
            save_checkpoint(shared, ckpt_path)
        log.info("shared checkpoint accuracy %.4f", evaluate(shared, data.val))
    snap_dir = os.path.join(out, "snapshots") if scfg.snapshot_every else None
    if snap_dir:
        os.makedirs(snap_dir, exist_ok=True)
    if args.resume and not os.path.exists(state_path):
        log.info("no state file at %s, starting fresh", state_path)
    theta, records = search.run_search(
        scfg, data, omega_share=shared, state_path=state_path, resume=args.resume, snapshot_dir=snap_dir,
        evaluator=search.evaluate_policy,
    )
    save_policy(theta, os.path.join(out, "policy.txt"))
    search.write_records_csv(records, os.path.join(out, "records.csv"))
    search.write_marginals_csv(records, os.path.join(out, "marginals.csv"), initial=search.uniform_like(theta))
    _print_top(theta)
    return EXIT_OK


def cmd_compare_proxies(args) -> int:
    cfg = _prepare(args)
    data = _data(cfg)
    ex = cfg.experiments
    cmp = search.compare_proxies(cfg.search_config(), data, ex.n_policies, full_repeats=ex.full_repeats,
                                 workers=cfg.workers)
    search.write_proxy_csv(cmp, os.path.join(cfg.out, "proxies.csv"))
    search.write_proxy_scores_csv(cmp, os.path.join(cfg.out, "proxy_scores.csv"))
    for row in cmp.rows:
        shown = "n/a" if row.pearson_r is None else f"{row.pearson_r:.4f}"
        print(f"{row.variant}  r={shown} {row.flag}".rstrip())
    return EXIT_OK


def _ablate_job(job):
    scfg, data, p, seed = job
    return search.full_training_accuracy(scfg, data, p, seed)


def cmd_ablate(args) -> int:
    cfg = _prepare(args)
    policy = _load_policy_arg(args.policy)
    if policy is None:
        raise UserError("ablate needs --policy")
    data = _data(cfg)
    scfg = cfg.search_config()
    ex = cfg.experiments
    seeds = [cfg.seed * 1000 + s for s in range(ex.ablate_seeds)]
    ranked = ranked_ops(policy)
    rows = []
    for k in range(ex.ablate_k_max + 1):
        p = mask_top_k(policy, k)
        accs = search._parallel_map(_ablate_job, [(scfg, data, p, s) for s in seeds], cfg.workers)
        removed = " ".join(str(int(i)) for i in ranked[:k])
        rows.append((k, removed, float(np.mean(accs)), float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0))
        print(f"k={k} removed=[{removed}] error={1 - rows[-1][2]:.4f}")
    with open(os.path.join(cfg.out, "ablation.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k_removed", "removed_ops", "mean_acc", "std_acc", "mean_error"])
        for k, removed, mean, std in rows:
            w.writerow([k, removed, "%.6f" % mean, "%.6f" % std, "%.6f" % (1 - mean)])
    return EXIT_OK


def cmd_schedule(args) -> int:
    cfg = _prepare(args)
    ex = cfg.experiments
    policy = _load_policy_arg(args.policy or ex.schedule_policy) or search.uniform_like()
    data = _data(cfg)
    scfg = cfg.search_config()
    total = scfg.total_epochs
    bad = [n for n in ex.schedule_grid if not 0 <= n <= total]
    if bad:
        raise UserError(f"schedule grid values {bad} outside [0, {total}]")
    seeds = [cfg.seed * 1000 + s for s in range(ex.schedule_seeds)]
    rows = search.schedule_experiment(scfg, data, ex.schedule_grid, policy, seeds=seeds, workers=cfg.workers)
    search.write_schedule_csv(rows, os.path.join(cfg.out, "schedule.csv"))
    for r in rows:
        print(f"n_aug={r.n_aug:3d} {r.placement:5s} acc={r.mean_acc:.4f} +- {r.std_acc:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _prepare(args)
    v = cfg.verify
    mode = args.mode or v.mode
    rows = oracle.verification_suite(v.n_thetas, v.max_k_ops, v.max_n_steps, v.grid_resolution, mode, cfg.seed,
                                     v.theta_scale)
    with open(os.path.join(cfg.out, "verify.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "k_ops", "n_steps", "k_early", "mode", "verified", "margin", "kl_uniform", "best_kl",
                    "closed_form_error"])
        for r in rows:
            w.writerow([r.index, r.space.k_ops, r.space.n_steps, r.space.k_early, mode, int(r.report.verified),
                        "%.12g" % r.report.margin, "%.12g" % r.report.kl_uniform, "%.12g" % r.report.best_kl,
                        "%.3g" % r.closed_form_error])
    n_ok = sum(r.report.verified for r in rows)
    worst = min(r.report.margin for r in rows)
    max_err = max(r.closed_form_error for r in rows)
    print(f"mode={mode}: uniform minimizer verified for {n_ok}/{len(rows)} policies; min margin {worst:.6g}")
    print(f"closed-form agreement: max abs error {max_err:.3g}")
    if n_ok < len(rows) or max_err > 1e-12:
        print("verification FAILED")
        return EXIT_FALSIFIED
    print("verification passed")
    return EXIT_OK


def _read_image(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def _write_image(img: np.ndarray, path: str) -> None:
    from PIL import Image

    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def cmd_apply(args) -> int:
    cfg = _prepare(args)
    policy = _load_policy_arg(args.policy)
    if policy is None:
        raise UserError("apply needs --policy")
    if not args.input or not os.path.isdir(args.input):
        raise UserError(f"input directory not found: {args.input}")
    if not args.output:
        raise UserError("apply needs --output")
    names = sorted(n for n in os.listdir(args.input) if n.lower().endswith(IMAGE_SUFFIXES))
    if not names:
        raise UserError(f"no images in {args.input}")
    os.makedirs(args.output, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 5])
    ops = sample_ops(policy, rng, len(names))
    manifest = []
    for name, k in zip(names, ops):
        img = _read_image(os.path.join(args.input, name))
        out = augment.apply_op(img, int(k), rng, cfg.train.fill)
        target = os.path.splitext(name)[0] + ".png"
        _write_image(out, os.path.join(args.output, target))
        manifest.append((name, target, int(k), augment.op_name(int(k))))
    with open(os.path.join(args.output, "ops.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input", "output", "op_id", "op"])
        w.writerows(manifest)
    print(f"wrote {len(manifest)} augmented images to {args.output}")
    return EXIT_OK


COMMANDS = {
    "search": cmd_search,
    "compare-proxies": cmd_compare_proxies,
    "ablate": cmd_ablate,
    "schedule": cmd_schedule,
    "verify": cmd_verify,
    "apply": cmd_apply,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="awsaug", description="Augmentation policy search with shared weights.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--preset", choices=["toy", "paper-cifar", "paper-imagenet"], default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=None)
    common.add_argument("--resume", action="store_true", help="continue from the state file in --out")
    common.add_argument("--out", default=None, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("ablate", "schedule", "apply"):
            p.add_argument("--policy", help="policy file")
        if name == "apply":
            p.add_argument("--input", help="directory of input images")
            p.add_argument("--output", help="directory for augmented copies")
        if name == "verify":
            p.add_argument("--mode", choices=["ensemble", "per-theta"], default=None)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USER if exc.code else EXIT_OK
    if args.preset is None and args.config is None:
        args.preset = "toy"
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UserError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    finally:
        while _HANDLERS:
            h = _HANDLERS.pop()
            log.removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
