"""Command-line entry point: ``radiomap <subcommand> [flags]``.

Subcommands: generate, train, eval, active, gradcheck, export. A key=value
config file (``--config``) may set any flag by its long name; flags given on
the command line win. Failures print one ``error code=... message=...`` line
on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

logger = logging.getLogger("radiomap")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = EXIT_RUNTIME):
        super().__init__(message)
        self.code = code
        self.status = status


def _fail(code: str, message: str, status: int) -> int:
    message = " ".join(str(message).split())
    print(f"error code={code} message={message}", file=sys.stderr)
    return status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        code = "unknown_flag" if "unrecognized arguments" in message else "usage"
        raise CliError(code, f"{self.prog}: {message}", EXIT_USAGE)


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    add = {
        "seed": lambda: p.add_argument("--seed", type=int, default=0, help="seed for every stochastic stage"),
        "out": lambda: p.add_argument("--out", default="out", help="output directory; all artifacts go below it"),
        "manifest": lambda: p.add_argument("--manifest", default="data/manifest.tsv", help="dataset manifest"),
        "scenes": lambda: p.add_argument("--scenes", default="crossroad,building_dense", help="comma list of scene categories or 'all'"),
        "ratio": lambda: p.add_argument("--ratio", type=float, default=0.10, help="sampling ratio"),
        "mode": lambda: p.add_argument("--mode", choices=("random", "grid", "road"), default="random", help="sampling mode"),
        "policy": lambda: p.add_argument("--policy", choices=("uncertainty_topk", "random"), default="uncertainty_topk", help="acquisition policy for curve.csv"),
        "rounds": lambda: p.add_argument("--rounds", type=int, default=4, help="acquisition rounds"),
        "budget": lambda: p.add_argument("--budget", type=float, default=0.01, help="queried fraction of the patch area per round"),
        "epochs": lambda: p.add_argument("--epochs", type=int, default=30, help="maximum training epochs"),
        "batch": lambda: p.add_argument("--batch", type=int, default=8, help="batch size"),
        "lr": lambda: p.add_argument("--lr", type=float, default=1e-4, help="initial learning rate"),
        "tiny": lambda: p.add_argument("--tiny", action="store_true", default=False, help="use the reduced configuration"),
        "threads": lambda: p.add_argument("--threads", type=int, default=1, help="CPU threads (fixed for determinism)"),
        "domain": lambda: p.add_argument("--domain", choices=("accessible", "unobs"), default="unobs", help="metric domain"),
        "model": lambda: p.add_argument("--model", default=None, help="trained model directory (default: --out)"),
        "config": lambda: p.add_argument("--config", default=None, help="key=value file mirroring the flags"),
        "max_patches": lambda: p.add_argument("--max-patches", type=int, default=0, help="limit on test patches (0 = all)"),
    }
    for n in names:
        add[n]()


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="radiomap", description="Sparse radio map reconstruction pipeline.", formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="build scenes, gain maps, patches and manifest", formatter_class=fmt)
    _common(p, "seed", "out", "scenes", "ratio", "mode", "tiny", "config")
    p.add_argument("--grid", type=int, default=256, help="scene grid size")
    p.add_argument("--n-bs", type=int, default=2, help="base stations per scene")
    p.add_argument("--patches", type=int, default=40, help="patches per base station")
    p.add_argument("--patch-size", type=int, default=64, help="patch side in cells")

    p = sub.add_parser("train", help="train the network; writes checkpoint and history CSV", formatter_class=fmt)
    _common(p, "seed", "out", "manifest", "ratio", "mode", "epochs", "batch", "lr", "tiny", "threads", "config")

    p = sub.add_parser("eval", help="metrics on the test split", formatter_class=fmt)
    _common(p, "seed", "out", "manifest", "ratio", "mode", "domain", "model", "threads", "config", "max_patches")
    p.add_argument("--images", action="store_true", default=False, help="also write PNG maps per patch")
    p.add_argument("--baseline", action="store_true", default=False, help="evaluate the nearest-fill baseline instead")

    p = sub.add_parser("active", help="uncertainty-guided acquisition episodes", formatter_class=fmt)
    _common(p, "seed", "out", "manifest", "ratio", "mode", "policy", "rounds", "budget", "model", "threads", "config", "max_patches")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss gradient", formatter_class=fmt)
    _common(p, "seed", "out", "tiny", "config")
    p.add_argument("--size", type=int, default=16, help="input side length")
    p.add_argument("--max-elements", type=int, default=10000, help="parameter elements to perturb")

    p = sub.add_parser("export", help="render planes of a patch as images", formatter_class=fmt)
    _common(p, "seed", "out", "manifest", "ratio", "mode", "config")
    p.add_argument("--patch", default="0", help="patch id or index into the manifest")
    p.add_argument("--planes", default="G,Gs,Ms,O,L", help="comma list of plane names")
    p.add_argument("--format", choices=("png", "pgm"), default="png", help="image format")
    return parser


def _explicit_dests(parser: argparse.ArgumentParser, argv: list[str]) -> set[str]:
    out = set()
    for action in parser._actions:
        for opt in action.option_strings:
            if any(a == opt or a.startswith(opt + "=") for a in argv):
                out.add(action.dest)
    return out


def _apply_config(args, sub: argparse.ArgumentParser, argv: list[str]) -> None:
    from .datasetio import read_sidecar

    if not args.config:
        return
    if not os.path.exists(args.config):
        raise CliError("missing_config", f"config file not found: {args.config}")
    explicit = _explicit_dests(sub, argv)
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    for key, text in read_sidecar(args.config).items():
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise CliError("config_unknown_key", f"config key {key!r} is not a flag of {args.command}", EXIT_USAGE)
        if dest in explicit:
            logger.info("flag --%s overrides config value %r", dest, text)
            continue
        a = actions[dest]
        try:
            if isinstance(a, argparse._StoreTrueAction):
                if text.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(text)
                val = text.lower() in ("1", "true", "yes")
            else:
                val = a.type(text) if a.type else text
        except (TypeError, ValueError) as exc:
            raise CliError("config_bad_value", f"config key {key!r}: cannot parse {text!r}", EXIT_USAGE) from exc
        if a.choices is not None and val not in a.choices:
            raise CliError("config_bad_value", f"config key {key!r}: {val!r} not in {tuple(a.choices)}", EXIT_USAGE)
        setattr(args, dest, val)


def _sampling(args):
    from .sampling import SamplingConfig

    return SamplingConfig(args.mode, args.ratio)


def _load(args):
    from .benchmark import load_dataset

    if not os.path.exists(args.manifest):
        raise CliError("missing_manifest", f"manifest not found: {args.manifest}")
    splits, stats = load_dataset(args.manifest, _sampling(args).tag)
    if len(splits["train"]) + len(splits["val"]) + len(splits["test"]) == 0:
        raise CliError("empty_dataset", f"no patches with sampling tag {_sampling(args).tag} in {args.manifest}")
    return splits, stats


def _load_model(args):
    from .estimators import GeoUQRegressor

    path = args.model or args.out
    if not os.path.exists(os.path.join(path, "estimator.json")):
        raise CliError("missing_model", f"no trained model in {path}")
    return GeoUQRegressor.load(path)


def _test_split(args, splits):
    test = splits["test"]
    if len(test) == 0:
        raise CliError("empty_split", "test split is empty")
    n = len(test) if args.max_patches <= 0 else min(args.max_patches, len(test))
    return test, n


# -- subcommands --------------------------------------------------------------


def cmd_generate(args) -> None:
    from .benchmark import DatasetConfig, generate_dataset
    from .scenegen import scene_categories

    cfg = DatasetConfig(
        scenes=tuple(scene_categories(args.scenes)),
        grid_size=args.grid,
        n_bs=args.n_bs,
        patches_per_bs=args.patches,
        patch_size=args.patch_size,
        sampling=(_sampling(args),),
        seed=args.seed,
    )
    if args.tiny:
        cfg = replace(cfg, grid_size=128, n_bs=1, patches_per_bs=8, patch_size=32)
    path = generate_dataset(cfg, args.out)
    print(path)


def cmd_train(args) -> None:
    from .estimators import GeoUQRegressor
    from .net import NetConfig
    from .priors import normalize_stack

    splits, stats = _load(args)
    if len(splits["train"]) == 0 or len(splits["val"]) == 0:
        raise CliError("empty_split", "train and val splits must be nonempty")
    net = NetConfig.tiny() if args.tiny else NetConfig()
    est = GeoUQRegressor(
        **{k: v for k, v in net.to_dict().items() if k in GeoUQRegressor().get_params() and k != "logvar_clip"},
        logvar_clip=net.logvar_clip,
        batch_size=args.batch, max_epochs=args.epochs, lr=args.lr, random_state=args.seed, threads=args.threads,
    )
    tr, va = splits["train"], splits["val"]
    est.fit(normalize_stack(tr.raw, stats), tr.target_norm, normalize_stack(va.raw, stats), va.target_norm,
            stats=stats, out_dir=args.out)
    est.save(args.out)
    h = est.history_
    print(f"epochs={len(h.rows)} best_epoch={h.best_epoch} aborted={int(h.aborted)} params={est.n_parameters_}")


def cmd_eval(args) -> None:
    from .estimators import NearestFillRegressor
    from .evalkit import aggregate, evaluate, write_png, write_report_csv
    from .priors import CH, denormalize_gain, normalize_stack

    splits, stats = _load(args)
    test, n = _test_split(args, splits)
    est = NearestFillRegressor().fit(test.raw[:1]) if args.baseline else _load_model(args)
    x = normalize_stack(test.raw[:n], stats)
    g_hat, u = est.predict(x, return_std=True)
    g_hat_db = np.where(test.raw[:n, CH["Ms"]] > 0.5, test.raw[:n, CH["Gs"]], denormalize_gain(g_hat))
    domain = "unobs_accessible" if args.domain == "unobs" else "accessible"
    os.makedirs(args.out, exist_ok=True)
    reports = []
    for k in range(n):
        ma, ms = test.raw[k, CH["Ma"]], test.raw[k, CH["Ms"]]
        scene = test.ids[k].split("/")[0]
        rep = evaluate(g_hat_db[k], test.target_db[k], u[k], ma, ms, domain, keys={"patch_id": test.ids[k], "scene": scene})
        reports.append(rep)
        if args.images:
            stem = os.path.join(args.out, test.ids[k].replace("/", "_"))
            write_png(stem + "_pred.png", g_hat_db[k], -140, -50)
            write_png(stem + "_true.png", test.target_db[k], -140, -50)
            write_png(stem + "_unc.png", u[k])
    name = "metrics_baseline.csv" if args.baseline else "metrics.csv"
    write_report_csv(os.path.join(args.out, name), reports)
    for rep in reports:
        rep.keys["domain"] = domain
    overall = aggregate(reports, "domain")[domain]
    print(f"rmse_db={overall['rmse_db']:.4f} mae_db={overall['mae_db']:.4f} "
          f"err_unc_corr={overall['err_unc_corr']:.4f} n_patches={overall['n_patches']}")


def cmd_active(args) -> None:
    from .active import (
        ActiveConfig, ModelReconstructor, run_episode, summarize, write_curve_csv, write_episodes_csv, write_summary_csv,
    )
    from .benchmark import derive_seed

    splits, stats = _load(args)
    test, n = _test_split(args, splits)
    model = ModelReconstructor(_load_model(args), stats)
    eps = {p: [] for p in ("uncertainty_topk", "random")}
    for k in range(n):
        for policy in eps:
            cfg = ActiveConfig(args.rounds, args.budget, policy, seed=derive_seed(args.seed, k))
            eps[policy].append(run_episode(model, test.raw[k], test.target_db[k], cfg, key=test.ids[k]))
    os.makedirs(args.out, exist_ok=True)
    write_curve_csv(os.path.join(args.out, "curve.csv"), eps[args.policy])
    write_episodes_csv(os.path.join(args.out, "episodes.csv"), eps["uncertainty_topk"] + eps["random"])
    s = summarize(eps["uncertainty_topk"], eps["random"])
    write_summary_csv(os.path.join(args.out, "summary.csv"), s)
    print(f"uq_rmse_db={s.uq_rmse_db:.4f} random_rmse_db={s.random_rmse_db:.4f} gain_db={s.gain_db:.4f} "
          f"win_rate={s.win_rate:.3f} n={s.n_patches}")


def cmd_gradcheck(args) -> int:
    from .net import NetConfig
    from .trainer import model_grad_check

    cfg = NetConfig.tiny() if args.tiny else NetConfig()
    rep = model_grad_check(cfg, size=args.size, seed=args.seed, max_elements=args.max_elements)
    text = rep.format()
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "gradcheck.txt"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text.splitlines()[-1])
    if not rep.passed:
        raise CliError("gradcheck_failed", f"max relative error {rep.max_error:.3e} exceeds {rep.tolerance:.1e}")
    return 0


def cmd_export(args) -> None:
    from .benchmark import load_patch
    from .datasetio import read_manifest
    from .evalkit import write_pgm, write_png
    from .priors import PRIOR_CHANNELS

    if not os.path.exists(args.manifest):
        raise CliError("missing_manifest", f"manifest not found: {args.manifest}")
    tag = _sampling(args).tag
    rows = [r for r in read_manifest(args.manifest) if r.files[1].endswith(f".{tag}.rmg")]
    if not rows:
        raise CliError("empty_dataset", f"no patches with sampling tag {tag}")
    match = [r for r in rows if r.patch_id == args.patch]
    if not match:
        try:
            match = [rows[int(args.patch)]]
        except (ValueError, IndexError) as exc:
            raise CliError("unknown_patch", f"no patch {args.patch!r} in the manifest") from exc
    row = match[0]
    pri, g, gs, ms = load_patch(os.path.dirname(os.path.abspath(args.manifest)), row)
    planes = {**{k: getattr(pri, k) for k in PRIOR_CHANNELS}, "G": g, "Gs": np.where(ms, gs, -140.0), "Ms": ms.astype(float)}
    os.makedirs(args.out, exist_ok=True)
    writer = write_png if args.format == "png" else write_pgm
    for name in [s.strip() for s in args.planes.split(",") if s.strip()]:
        if name not in planes:
            raise CliError("unknown_plane", f"plane {name!r} not in {sorted(planes)}")
        lim = (-140.0, -50.0) if name in ("G", "Gs") else (None, None)
        path = os.path.join(args.out, f"{row.patch_id.replace('/', '_')}_{name}.{args.format}")
        writer(path, planes[name], *lim)
        print(path)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "active": cmd_active,
    "gradcheck": cmd_gradcheck,
    "export": cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(args, sub, argv)
        from .autodiff import set_determinism

        set_determinism(getattr(args, "threads", 1))
        COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.code, exc, exc.status)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc, EXIT_RUNTIME)
    except ValueError as exc:
        return _fail(getattr(exc, "code", "invalid_value"), exc, EXIT_RUNTIME)
    return 0


if __name__ == "__main__":
    sys.exit(main())
