"""Command line entry point: ``defxattn <command> [options] [key=value ...]``.

Trailing ``key=value`` arguments override the config file. Failures print a
single line ``error <Code>: <message>`` on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import attention as attn
from . import complexity as cx
from . import registration as reg
from .config import RunConfig, load_config, parse_overrides, save_config
from .core import Tensor, gradcheck, tsum
from .data import load_dataset, synth_dataset
from .errors import DefxattnError
from .network import init_params, model_forward

EXIT_ERROR = 2
EXIT_CHECK_FAILED = 1


def _run_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config:
        return load_config(args.config, overrides)
    return parse_overrides(overrides)


def _pairs(cfg: RunConfig, data_dir: str | None):
    if data_dir:
        return load_dataset(data_dir)
    return synth_dataset(cfg.seed, cfg.n_pairs, cfg.model.image_size, cfg.n_labels, cfg.max_warp,
                         cfg.multimodal, cfg.field_sigma)


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = args.out or "data"
    synth_dataset(cfg.seed, cfg.n_pairs, cfg.model.image_size, cfg.n_labels, cfg.max_warp,
                  cfg.multimodal, cfg.field_sigma, out_dir=out)
    print(f"wrote {cfg.n_pairs} pairs to {out}")
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _run_config(args)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        save_config(cfg, os.path.join(cfg.out_dir, "config.txt"))

    def log(row):
        print(f"epoch {row['epoch']:4d}  iter {row['iterations']:5d}  loss {row['loss']:+.5f}  "
              f"ncc {row['ncc']:+.5f}  dice {row['dice']:.5f}  diff {row['diff']:.5f}  "
              f"val_dice {row['val_dice']:.4f}", flush=True)

    result = train(cfg, log=log)
    print(f"baseline val dice {result.baseline_val_dice:.4f}, best {result.best_val_dice:.4f}")
    if result.checkpoint:
        print(f"checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, load_model

    store, cfg = load_model(args.checkpoint)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    pairs = _pairs(cfg, args.data)
    if not args.data:
        pairs = pairs[cfg.n_train:] or pairs
    out = args.out or "eval"
    rows = evaluate(store, cfg.model, pairs, out)
    for row in rows:
        print(f"pair {row['pair_id']}: dice {row['dice_pre']:.4f} -> {row['dice_mean']:.4f}  "
              f"hd95 {row['hd95']:.3f}  %|J|<=0 {row['pct_nonpositive']:.3f}")
    print(f"metrics {os.path.join(out, 'metrics.csv')}")
    return 0


def cmd_bench(args) -> int:
    cfg = _run_config(args) if (args.config or args.overrides) else None
    configs = cx.default_configs()
    if cfg is not None:
        m = cfg.model
        configs.append(cx.ComplexityConfig("run", m.window, (3, 3, 3), m.embed_dim, m.n_heads[0],
                                           m.offset_kernel, m.stage_grid(0)))
    rows = cx.complexity_report(configs)
    print(cx.format_table(rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "complexity.csv")
        with open(path, "w") as fh:
            fh.write(cx.report_csv(rows))
        print(f"csv {path}")
    status = 0
    if args.instrument:
        for c in configs:
            if c.grid is None:
                continue
            for mech, r in cx.instrumented_counts(c).items():
                ok = "match" if r["match"] else "MISMATCH"
                print(f"instrumented {c.name} {mech}: scores {r['counted_scores']} vs {r['analytic_scores']}, "
                      f"av {r['counted_av']} vs {r['analytic_av']} {ok}")
                if not r["match"]:
                    status = EXIT_CHECK_FAILED
    return status


def gradient_suite(seed: int = 0, tol: float = 1e-4, h: float = 1e-5) -> dict:
    """Finite-difference checks of the model, the NCC loss and the offset network."""
    rng = np.random.default_rng(seed)
    reports = {}

    cfg = RunConfig().model
    store = init_params(cfg, rng)
    for name, t in store.items():  # lift zero-initialised layers so every path carries gradient
        if name == "dec.head.w" or ".offset_pw_" in name:
            t.data = rng.normal(0.0, 0.05, size=t.shape)
    m = Tensor(rng.normal(size=(1,) + cfg.image_size))
    f = Tensor(rng.normal(size=(1,) + cfg.image_size))
    names = sorted(store)
    flat = [(n, i) for n in names for i in range(store[n].size)]
    chosen = [flat[k] for k in rng.choice(len(flat), size=32, replace=False)]
    idx: dict[str, list[int]] = {}
    for n, i in chosen:
        idx.setdefault(n, []).append(i)

    def model_loss():
        u = model_forward(m, f, store, cfg)
        return tsum(u * u)

    reports["model_forward"] = gradcheck(model_loss, {n: store[n] for n in idx},
                                         indices={n: np.array(v) for n, v in idx.items()}, h=h, tol=tol)

    a = Tensor(rng.normal(size=(1, 8, 8, 8)))
    b = Tensor(rng.normal(size=(1, 8, 8, 8)) + 0.5 * a.data)
    reports["ncc_loss"] = gradcheck(lambda: reg.ncc_loss(a, b, 5), {"warped": a},
                                    indices={"warped": rng.choice(a.size, 48, replace=False)}, h=h, tol=tol)

    from .core import ParameterStore

    ps = ParameterStore()
    p = attn.init_attention_params(ps, "blk", 8, 2, rng, offset_kernel=3)
    p.offset_pw_weight.data = rng.normal(0.0, 0.3, size=p.offset_pw_weight.shape)
    p.offset_pw_bias.data = rng.uniform(0.1, 0.4, size=p.offset_pw_bias.shape)
    layout = attn.make_layout((4, 4, 4), (2, 2, 2))
    xb = Tensor(rng.normal(size=(4, 4, 4, 8)))
    xr = Tensor(rng.normal(size=(4, 4, 4, 8)))
    w = Tensor(rng.normal(size=(4, 4, 4, 8)))
    params = {"dw": p.offset_dw_kernel, "dwb": p.offset_dw_bias, "pw": p.offset_pw_weight, "pwb": p.offset_pw_bias}
    reports["dw_mca_offsets"] = gradcheck(
        lambda: tsum(attn.dw_mca_block(xb, xr, p, layout) * w), params,
        indices={"dw": rng.choice(p.offset_dw_kernel.size, 16, replace=False),
                 "pw": rng.choice(p.offset_pw_weight.size, 16, replace=False)}, h=h, tol=tol)
    return reports


def cmd_gradcheck(args) -> int:
    reports = gradient_suite(args.seed if args.seed is not None else 0)
    for name, rep in reports.items():
        print(f"{name}: {rep}")
    return 0 if all(r.passed for r in reports.values()) else EXIT_CHECK_FAILED


def cmd_dump_grid(args) -> int:
    if args.checkpoint:
        from .training import load_model

        store, cfg = load_model(args.checkpoint)
    else:
        cfg = _run_config(args)
        store = init_params(cfg.model, np.random.SeedSequence(cfg.seed).spawn(2)[0])
    if cfg.model.attention != "dw_mca":
        print("model uses fixed-window attention; no deformable sampling to dump")
        return 0
    pair = _pairs(cfg.replace(n_train=1, n_val=0) if not args.data else cfg, args.data)[0]
    with attn.record_sampling() as records:
        model_forward(Tensor(pair.moving[None]), Tensor(pair.fixed[None]), store, cfg.model)
    out = args.out or "sampling_grid"
    paths = attn.dump_sampling_grid(records, out)
    print(f"wrote {len(paths)} sampling grids to {out}")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset"),
    "train": (cmd_train, "train a model, writing loss.csv and checkpoints"),
    "eval": (cmd_eval, "evaluate a checkpoint: metrics CSV and volume dumps"),
    "bench": (cmd_bench, "attention complexity report"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suite"),
    "dump-grid": (cmd_dump_grid, "dump deformable sampling coordinates for one pair"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error UsageError: {message}", file=sys.stderr)
        sys.exit(EXIT_ERROR)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="defxattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        if name == "bench":
            p.add_argument("--instrument", action="store_true",
                           help="cross-check analytic counts against counted multiplies")
        if name in ("eval", "dump-grid"):
            p.add_argument("--checkpoint", required=(name == "eval"), help="checkpoint file (.dcax)")
            p.add_argument("--data", help="dataset directory written by synth (default: regenerate from the config)")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except DefxattnError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error {exc.code}: {msg}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error IOError: {exc.strerror or exc} ({exc.filename})", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
