"""Command-line entry point: experiment grids, verifiers, and reports.

Verbs:

* ``run``           -- (method x order x seed) grid of stream runs, CSV out.
* ``verify-ortho``  -- fixed orthogonality counterexamples plus random study.
* ``grad-check``    -- finite-difference check of the full gated loss on a
                       small end-to-end model.
* ``inspect-gates`` -- train once, then dump mean gate distributions per
                       site and eval task.
* ``report``        -- aggregate an out-dir's metrics.csv into a text table.

Exit codes: 0 success, 1 configuration/usage error (message names the
offending key), 2 runtime or verification failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import ortho
from .baselines import METHODS, MethodSpec, make_driver
from .checkpoint import load_checkpoint
from .configfile import (apply_overrides, config_digest, default_config,
                         format_config, load_config, to_method_spec,
                         to_model_config, to_stream, to_train_config)
from .errors import ConfigError
from .harness import run_stream
from .model import ModelConfig, build_model
from .tasks import ORDERS, generate_task

ND_SIZES = (2, 3, 4, 8, 16)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="amlora",
        description="Sequential low-rank adapter experiments with gated mixing.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="key=value config file (defaults apply if omitted)")
        sp.add_argument("--override", action="append", default=[],
                        metavar="K=V", help="config override, repeatable")
        sp.add_argument("--out-dir", metavar="PATH",
                        help="output directory (env AMLORA_OUT, else amlora_out)")
        sp.add_argument("--seeds", metavar="CSV",
                        help="comma-separated run seeds (default: config seed)")
        sp.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="parallel grid cells (default 1)")
        return sp

    runp = common(sub.add_parser("run", help="run an experiment grid"))
    runp.add_argument("--methods", metavar="CSV",
                      help="comma-separated methods (default: config method)")
    runp.add_argument("--orders", metavar="CSV",
                      help="comma-separated task orders (default: config order)")
    runp.add_argument("--save-checkpoints", action="store_true",
                      help="write a final model checkpoint per grid cell")

    orthop = common(sub.add_parser(
        "verify-ortho", help="check the orthogonality counterexamples"))
    orthop.add_argument("--trials", type=int, default=100,
                        help="random-study trials per nonlinearity")

    common(sub.add_parser(
        "grad-check", help="finite-difference check on a toy gated model"))
    common(sub.add_parser(
        "inspect-gates", help="dump mean gate distributions after training"))
    common(sub.add_parser(
        "report", help="aggregate metrics.csv in the out dir"))
    return p


def _out_dir(args) -> str:
    return args.out_dir or os.environ.get("AMLORA_OUT") or "amlora_out"


def _parse_csv_list(text: str, what: str, valid=None) -> list[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError(f"{what} list is empty")
    if valid is not None:
        bad = [s for s in items if s not in valid]
        if bad:
            raise ConfigError(f"unknown {what} {bad[0]!r}")
    return items


def _effective_config(args) -> dict:
    cfg = default_config()
    if args.config:
        cfg = load_config(args.config)
    return apply_overrides(cfg, args.override)


def _seeds(args, cfg) -> list[int]:
    if not args.seeds:
        return [cfg["seed"]]
    try:
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds expects integers, got {args.seeds!r}")


def _run_cell(cfg: dict, method: str, order: str, seed: int,
              out_dir: str, save_ckpt: bool):
    cell = dict(cfg)
    cell["method"], cell["order"], cell["seed"] = method, order, seed
    ckpt = None
    if save_ckpt:
        ckpt = os.path.join(out_dir, f"ckpt_{method}_{order}_seed{seed}.bin")
    # The stream is a fixed benchmark keyed by the config's own seed; the
    # run seed only varies training (init, batching, dropout, pretraining).
    rep = run_stream(to_stream(cell, seed=cfg["seed"]), to_method_spec(cell),
                     to_model_config(cell), to_train_config(cell), seed,
                     checkpoint_path=ckpt)
    rep.config_digest = config_digest(cell)
    return rep


def _write_text(path: str, text: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def _overhead_text(reports) -> str:
    lines = []
    for rep in reports:
        if rep.adapter_params_per_site == 0 and rep.selector_params_per_site == 0:
            lines.append(f"{rep.method}: base parameters {rep.base_params}, "
                         "no adapters attached")
            continue
        sel = rep.selector_params_per_site
        lines.append(
            f"{rep.method}: base parameters {rep.base_params}; per adapted "
            f"site: {rep.adapter_params_per_site} adapter + {sel} selector "
            f"params; selector share per site "
            f"{100.0 * sel / rep.base_params:.4f}% of base, total across "
            f"{rep.num_sites} sites "
            f"{100.0 * sel * rep.num_sites / rep.base_params:.4f}%")
    return "\n".join(lines) + "\n"


def _cmd_run(args) -> int:
    cfg = _effective_config(args)
    out_dir = _out_dir(args)
    seeds = _seeds(args, cfg)
    methods = (_parse_csv_list(args.methods, "method", METHODS)
               if args.methods else [cfg["method"]])
    orders = (_parse_csv_list(args.orders, "order", tuple(ORDERS))
              if args.orders else [cfg["order"]])
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    grid = [(m, o, s) for m in methods for o in orders for s in seeds]

    results = [None] * len(grid)
    failures = [None] * len(grid)

    def work(i):
        m, o, s = grid[i]
        try:
            results[i] = _run_cell(cfg, m, o, s, out_dir, args.save_checkpoints)
        except Exception as exc:  # keep the grid going; reported below
            failures[i] = f"{type(exc).__name__}: {exc}"

    os.makedirs(out_dir, exist_ok=True)
    if args.jobs == 1 or len(grid) == 1:
        for i in range(len(grid)):
            work(i)
    else:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(work, range(len(grid))))

    reports = [r for r in results if r is not None]
    if reports:
        from .harness import emit_report
        emit_report(reports, out_dir)
        _write_text(os.path.join(out_dir, "config_digest.txt"),
                    f"digest={config_digest(cfg)}\n{format_config(cfg)}")
        seen = set()
        first_per_method = [r for r in reports
                            if not (r.method in seen or seen.add(r.method))]
        _write_text(os.path.join(out_dir, "overhead.txt"),
                    _overhead_text(first_per_method))

    failed = 0
    for i, (m, o, s) in enumerate(grid):
        if failures[i] is not None:
            print(f"{m:>10} {o} seed={s}: FAILED  {failures[i]}")
            failed += 1
        else:
            rep = results[i]
            print(f"{m:>10} {o} seed={s}: final_avg_acc="
                  f"{rep.final_average_accuracy():.4f} "
                  f"mean_forgetting={rep.mean_forgetting():.4f}")
    print(f"wrote {out_dir}/metrics.csv, summary.csv, trajectory.csv "
          f"({len(reports)}/{len(grid)} runs)")
    return 2 if failed else 0


def _check(label: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {label}: {detail}")
    return ok


def _cmd_verify_ortho(args) -> int:
    out_dir = _out_dir(args)
    ok = True
    c1 = ortho.counterexample_1d()
    ok &= _check("1d", c1.residual == 0.0
                 and np.array_equal(c1.out_a, [1.0])
                 and np.array_equal(c1.out_ab, [-1.0]),
                 f"sin outputs {c1.out_a[0]:+.0f} vs {c1.out_ab[0]:+.0f}, "
                 f"residual {c1.residual}")
    c2 = ortho.counterexample_2d()
    ok &= _check("2d", c2.residual == 0.0
                 and np.array_equal(c2.out_a, [1.0, 0.0])
                 and np.array_equal(c2.out_ab, [0.0, 1.0]),
                 f"outputs {c2.out_a.tolist()} vs {c2.out_ab.tolist()}, "
                 f"residual {c2.residual}")
    nd_ok = True
    for n in ND_SIZES:
        c = ortho.counterexample_nd(n)
        e1 = np.zeros(n)
        e1[0] = 1.0
        en = np.zeros(n)
        en[-1] = 1.0
        nd_ok &= (c.residual == 0.0 and np.array_equal(c.out_a, e1)
                  and np.array_equal(c.out_ab, en)
                  and abs(c.deviation - math.sqrt(2.0)) < 1e-12)
    ok &= _check("nd", nd_ok,
                 f"e1 vs en with deviation sqrt(2) for n in {ND_SIZES}")
    trials = []
    summaries = []
    study_ok = True
    for nl in ortho.NONLINEARITIES:
        t, s = ortho.random_orthogonality_study(8, args.trials, nl, seed=0)
        trials.extend(t)
        summaries.append(s)
        study_ok &= s.max_residual < 1e-10 and s.mean_deviation > 1e-6
    ok &= _check("study", study_ok,
                 f"{args.trials} trials per nonlinearity at n=8, "
                 f"max residual {max(s.max_residual for s in summaries):.2e}")
    text = ortho.format_summary([c1, c2] + [ortho.counterexample_nd(n)
                                            for n in ND_SIZES], summaries)
    print(text, end="")
    ortho.write_ortho_report(trials, text, out_dir)
    print(f"wrote {out_dir}/ortho_report.csv and ortho_summary.txt")
    return 0 if ok else 2


def gradcheck_toy(seed: int = 0) -> float:
    """Max relative gradient error of the full gated loss on a tiny model.

    One transformer layer at d=8 with rank-2 adapters for two tasks; the
    loss is cross-entropy plus the L1 gate-sparsity term, and the check
    covers the second task's trainable set (new adapter pair + all heads).
    """
    cfg = ModelConfig(vocab_size=16, embed_dim=8, num_layers=1, num_heads=2,
                      seq_len=4, num_classes=2, dropout_rate=0.0,
                      adapter_sites=("query", "value"))
    model = build_model(cfg, seed)
    driver = make_driver(MethodSpec("amlora", rank=2, alpha=4.0,
                                    variant="AR", lam=1e-3))
    driver.attach(model, seed + 1)
    driver.start_stage(model, 0, seed + 2)
    driver.end_stage(model, 0)
    params = driver.start_stage(model, 1, seed + 3)
    # Nudge everything off its zero init so the gradients are generic.
    rng = np.random.default_rng(seed + 4)
    for site in model.sites.values():
        for a in site.stack.task_adapters:
            a.A.data = rng.normal(0.0, 0.05, a.A.data.shape)
            a.B.data = rng.normal(0.0, 0.05, a.B.data.shape)
        for h in site.selector.heads:
            h.data = rng.normal(0.0, 0.05, h.data.shape)
    x = rng.integers(0, cfg.vocab_size, size=(6, cfg.seq_len))
    y = rng.integers(0, cfg.num_classes, size=6)

    def loss_fn(_params):
        loss = ad.cross_entropy(model.forward(x, mode="eval"), y)
        extra = driver.extra_loss(model)
        return loss + extra if extra is not None else loss

    return ad.finite_diff_check(loss_fn, params)


def _cmd_grad_check(args) -> int:
    cfg = _effective_config(args)
    err = gradcheck_toy(cfg["seed"])
    ok = err < 1e-4
    print(f"{'PASS' if ok else 'FAIL'} grad-check: max relative error "
          f"{err:.3e} (threshold 1e-4)")
    return 0 if ok else 2


def _cmd_inspect_gates(args) -> int:
    cfg = _effective_config(args)
    cfg["method"] = "amlora"
    out_dir = _out_dir(args)
    seed = _seeds(args, cfg)[0]
    os.makedirs(out_dir, exist_ok=True)
    ckpt = os.path.join(out_dir, f"inspect_model_seed{seed}.bin")
    cell = dict(cfg)
    cell["seed"] = seed
    stream = to_stream(cell, seed=cfg["seed"])
    run_stream(stream, to_method_spec(cell), to_model_config(cell),
               to_train_config(cell), seed, checkpoint_path=ckpt)
    model = load_checkpoint(ckpt)
    for site in model.sites.values():
        site.gate_capture = {}
    rows = []
    for i, spec in enumerate(stream.tasks):
        data = generate_task(spec)
        with ad.no_grad():
            model.forward(data.eval_x[:200], mode="eval")
        for name in sorted(model.sites):
            g = model.sites[name].gate_capture["gates"]
            mean = g.reshape(-1, g.shape[-1]).mean(axis=0)
            rows.append((name, i, mean))
    print("mean gate weight per adapter (column 0 is the zero adapter):")
    for name, i, mean in rows:
        vals = " ".join(f"{v:.3f}" for v in mean)
        print(f"  {name:<18} eval_task={i}  [{vals}]")
    lines = ["site,eval_task,adapter_index,mean_gate"]
    for name, i, mean in rows:
        for j, v in enumerate(mean):
            lines.append(f"{name},{i},{j},{repr(float(v))}")
    _write_text(os.path.join(out_dir, "gates.csv"), "\n".join(lines) + "\n")
    print(f"wrote {out_dir}/gates.csv")
    return 0


def _cmd_report(args) -> int:
    import csv as _csv
    out_dir = _out_dir(args)
    path = os.path.join(out_dir, "metrics.csv")
    if not os.path.exists(path):
        raise ConfigError(f"no metrics.csv under {out_dir!r}; run `run` first")
    acc = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in _csv.DictReader(f):
            key = (row["method"], int(row["seed"]), row["order_id"])
            acc.setdefault(key, {})[(int(row["after_task"]),
                                     int(row["eval_task"]))] = \
                float(row["accuracy"])
    per_method = {}
    for (method, _, _), cells in acc.items():
        n = max(t for t, _ in cells) + 1
        final = [cells[(n - 1, i)] for i in range(n)]
        forget = [max(cells[(t, i)] for t in range(i, n)) - cells[(n - 1, i)]
                  for i in range(n)]
        entry = per_method.setdefault(method, {"acc": [], "forget": []})
        entry["acc"].append(float(np.mean(final)))
        entry["forget"].append(float(np.mean(forget)))
    print(f"{'method':>10} {'runs':>4} {'avg_acc':>16} {'mean_forgetting':>16}")
    for method in sorted(per_method):
        e = per_method[method]
        accs, forgets = np.array(e["acc"]), np.array(e["forget"])
        print(f"{method:>10} {len(accs):>4} "
              f"{accs.mean():>8.4f}+-{accs.std():<6.4f} "
              f"{forgets.mean():>8.4f}+-{forgets.std():<6.4f}")
    over = os.path.join(out_dir, "overhead.txt")
    if os.path.exists(over):
        with open(over, encoding="utf-8") as f:
            print(f.read(), end="")
    return 0


def parse_and_dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    handlers = {
        "run": _cmd_run,
        "verify-ortho": _cmd_verify_ortho,
        "grad-check": _cmd_grad_check,
        "inspect-gates": _cmd_inspect_gates,
        "report": _cmd_report,
    }
    try:
        return handlers[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
