"""``ytmt`` command line: gen-data, train, separate, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.  Flags override the config file.  Relative output paths
are resolved under ``$YTMT_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .config import Config
from .errors import ConfigError, ContractError, DimensionError, IngestionError, NumericError, ParameterError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "YTMT_OUTPUT_ROOT"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_output(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _load_config(args) -> Config:
    cfg = Config.load(args.config) if getattr(args, "config", None) else Config()
    run = {k: getattr(args, k, None) for k in ("variant", "iterations", "seed", "batch_size", "checkpoint_every")}
    if getattr(args, "adversarial", False):
        run["adversarial"] = True
    cfg = cfg.override("run", **run)
    data = {"train_count": getattr(args, "count", None), "crop": getattr(args, "crop", None),
            "seed": getattr(args, "data_seed", None)}
    cfg = cfg.override("data", **data)
    if getattr(args, "base_channels", None) is not None:
        cfg = cfg.override("model", base_channels=args.base_channels)
    return cfg


def _print_config(cfg: Config, out) -> None:
    out("# effective config")
    out(cfg.to_text().rstrip())


# -- commands ---------------------------------------------------------------
def cmd_gen_data(args, out=print) -> int:
    from .data import directory_checksum, procedural_sample, sample_checksum, write_sample_directory

    cfg = _load_config(args)
    _print_config(cfg, out)
    spec = cfg.data.dataset_spec()
    root = resolve_output(args.out)
    root.mkdir(parents=True, exist_ok=True)
    samples = [procedural_sample(spec, i) for i in range(spec.count)]
    write_sample_directory(root, samples)
    first = sample_checksum(samples[0]) if samples else "-"
    out(f"samples: {len(samples)}")
    out(f"first sample checksum: {first}")
    out(f"directory checksum: {directory_checksum(root)}")
    return EXIT_OK


def cmd_train(args, out=print) -> int:
    from .train import init_network, run_training

    cfg = _load_config(args)
    if args.out_dir:
        cfg = cfg.override("run", out_dir=args.out_dir)
    _print_config(cfg, out)
    if args.dry_run:
        net = init_network(cfg)
        out(f"variant {cfg.run.variant}: {net.num_parameters()} parameters")
        return EXIT_OK
    result = run_training(cfg, resolve_output(cfg.run.out_dir), resume=args.resume, log=out)
    final = result.final
    out(f"final training loss (trailing mean): {final.final_loss():.6f}")
    out(f"checkpoint: {final.checkpoint}")
    if final.evaluation is not None:
        for key, value in sorted(final.evaluation.summary().items()):
            out(f"{key}: {value:.4f}")
    return EXIT_OK


def _check_compat(meta: dict, args) -> None:
    if not args.config:
        return
    from .train import config_diff

    want = Config.load(args.config)
    if want.net_config() != Config.from_dict(meta["config"]).net_config():
        diff = config_diff(meta["config"], want.to_dict())
        raise ContractError("checkpoint is incompatible with the given config:\n" + "\n".join(diff))


def _input_files(path: Path) -> list:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".ppm")
        if not files:
            raise IngestionError(f"no .ppm images in {path}")
        return files
    if not path.exists():
        raise IngestionError(f"input {path} does not exist")
    return [path]


def cmd_separate(args, out=print) -> int:
    from .data import read_ppm, write_ppm
    from .tensor import Tensor, no_grad
    from .train import load_network

    net, meta = load_network(args.checkpoint)
    _check_compat(meta, args)
    out("# checkpoint config")
    out(Config.from_dict(meta["config"]).to_text().rstrip())
    root = resolve_output(args.out)
    dirs = {k: root / k for k in ("T_hat", "R_hat", "residual")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    residuals = []
    for path in _input_files(Path(args.input)):
        image = read_ppm(path).astype(np.float32)
        with no_grad():
            t, r = net(Tensor(image[None]))
        t, r = t.data[0], r.data[0]
        res = np.abs(image - t - r)
        residuals.append(float(res.mean()))
        write_ppm(dirs["T_hat"] / path.name, np.clip(t, 0, 1))
        write_ppm(dirs["R_hat"] / path.name, np.clip(r, 0, 1))
        write_ppm(dirs["residual"] / path.name, np.clip(res, 0, 1))
    out(f"separated {len(residuals)} image(s) into {root}")
    out(f"mean additivity residual: {np.mean(residuals):.6f}")
    return EXIT_OK


def cmd_eval(args, out=print) -> int:
    from .train import evaluate, load_network, load_split

    net, meta = load_network(args.checkpoint)
    cfg = Config.load(args.config) if args.config else Config.from_dict(meta["config"])
    if args.data:
        cfg = cfg.override("data", source="directory", path=args.data, test_path=args.data)
    _print_config(cfg, out)
    result = evaluate(net, load_split(cfg, "test"), cfg.run.eval_batch)
    if not result.report.rows:
        raise IngestionError("evaluation split is empty")
    dest = resolve_output(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    result.report.write_csv(dest)
    for key, value in sorted(result.summary().items()):
        out(f"{key}: {value:.4f}")
    out(f"per-image metrics: {dest}")
    return EXIT_OK


def cmd_gradcheck(args, out=print) -> int:
    from .gradcheck import SUITE, run_suite

    names = None
    if args.ops:
        known = {case.name for case in SUITE}
        unknown = sorted(set(args.ops) - known)
        if unknown:
            raise ConfigError(f"unknown gradcheck case(s) {unknown}; known: {sorted(known)}")
        names = args.ops
    out(f"# gradcheck tol={args.tol} seed={args.seed}")
    failures = 0
    for report, ok in run_suite(tol=args.tol, seed=args.seed, names=names):
        failures += not ok
        out(f"{'PASS' if ok else 'FAIL'} {report.name:26s} rel={report.max_rel_error:.3e} "
            f"abs={report.max_abs_error:.3e} n={report.checked}")
    out(f"{failures} failure(s)")
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_ablate(args, out=print) -> int:
    from .train import ABLATION_VARIANTS, run_ablation_suite, table_means

    cfg = _load_config(args)
    _print_config(cfg, out)
    variants = tuple(args.variants) if args.variants else ABLATION_VARIANTS
    root = resolve_output(args.out)
    rows = run_ablation_suite(cfg, root, variants, tuple(args.seeds), log=out)
    out(f"{'variant':10s} {'psnr_T':>8s} {'ssim_T':>8s} {'loss':>9s}")
    for variant, m in table_means(rows).items():
        out(f"{variant:10s} {m['psnr_T']:8.3f} {m['ssim_T']:8.4f} {m['final_loss']:9.5f}")
    out(f"table: {root / 'table.csv'}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------
def _common(p, data=False):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--base-channels", type=int, dest="base_channels")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--adversarial", action="store_true")
    if data:
        p.add_argument("--count", type=int)
        p.add_argument("--crop", type=int)
        p.add_argument("--data-seed", type=int, dest="data_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ytmt", description="Dual-stream layer separation toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="write procedural mixtures as PPM files")
    _common(p, data=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a variant")
    _common(p, data=True)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--dry-run", action="store_true", help="build the model, print its size and exit")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", help="split images into transmission and reflection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="PPM image or directory of PPM images")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="verify the checkpoint matches this config")
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("eval", help="per-image metrics on the held-out split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config")
    p.add_argument("--data", help="directory with T/, R/ and optionally I/ subfolders")
    p.add_argument("--out", default="eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every registered op")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", nargs="+", help="check only these cases")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train all variants over several seeds")
    _common(p, data=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+")
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits on --help and on usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, ParameterError, DimensionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
