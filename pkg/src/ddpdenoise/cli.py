"""Command line: prepare -> corrupt -> train -> evaluate -> bench -> render.

Every subcommand accepts ``--config FILE``: a JSON object whose keys are the
subcommand's option names (dashes or underscores). Flags given on the command
line win over the file; unknown keys are rejected.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_graph, read_checkpoint
from .data import (DEFAULT_FRACTIONS, DatasetManifest, NoiseSpec, corrupt_manifest, decode_image,
                   gen_synthetic_phantoms, resize_bilinear, split_dataset, write_clean_set)
from .errors import (ConfigError, DecodeError, DomainError, FormatError, LoadError,
                     ReplicaDivergenceError, SizeError, TrainingAborted)
from .metrics import (ReportRow, emit_report, evaluate_testset, noisy_baseline, predict,
                      render_grid, table_row)
from .trainer import TrainConfig, time_report, train

log = logging.getLogger("ddpdenoise")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _bool_flag(p, name, help):
    p.add_argument(name, action=argparse.BooleanOptionalAction, default=False, help=help)


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="ddpdenoise", description=__doc__.split("\n")[0],
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter
    subs = {}

    p = subs["prepare"] = sub.add_parser("prepare", help="resize clean images and write a manifest",
                                         formatter_class=fmt)
    p.add_argument("--input-dir", help="directory of 8-bit grayscale PGM/PNG images")
    p.add_argument("--synthetic", type=int, default=None, help="generate N phantoms instead")
    p.add_argument("--size", type=int, default=256, help="output edge length in pixels")
    p.add_argument("--splits", default=",".join(map(str, DEFAULT_FRACTIONS)),
                   help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=0, help="split and phantom seed")
    p.add_argument("--out-manifest", default="data/manifest.json", help="manifest path")

    p = subs["corrupt"] = sub.add_parser("corrupt", help="add Gaussian noise to every image",
                                         formatter_class=fmt)
    p.add_argument("--manifest", help="manifest written by prepare")
    p.add_argument("--sigma", type=float, default=0.1, help="noise standard deviation")
    p.add_argument("--mean", type=float, default=0.1, help="noise mean")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--no-clamp", action="store_true", help="do not clamp noisy pixels to [0,1]")

    p = subs["train"] = sub.add_parser("train", help="train a denoiser", formatter_class=fmt)
    p.add_argument("--manifest", help="corrupted manifest")
    p.add_argument("--arch", choices=["unet", "unetpp"], default="unet")
    p.add_argument("--base-ch", type=int, default=8, help="channels at the top level")
    p.add_argument("--depth", type=int, default=4, help="number of levels")
    _bool_flag(p, "--deep-supervision", "U-Net++: train every head")
    p.add_argument("--mode", choices=["single", "dp", "ddp"], default="single")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--backend", choices=["process", "thread"], default="process",
                   help="DDP worker execution contexts")
    _bool_flag(p, "--amp", "emulated mixed precision")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-per-worker", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--noise-seed", type=int, default=0, help="recorded only; noise is fixed by corrupt")
    p.add_argument("--patience", type=int, default=None, help="early-stopping patience")
    _bool_flag(p, "--freeze-norm", "batch norm in eval mode during training")
    _bool_flag(p, "--shuffle", "reshuffle the training set every epoch")
    p.set_defaults(shuffle=True)
    p.add_argument("--out-dir", default="runs/train")

    p = subs["evaluate"] = sub.add_parser("evaluate", help="PSNR/SSIM on the test split",
                                          formatter_class=fmt)
    p.add_argument("--manifest")
    p.add_argument("--ckpt")
    p.add_argument("--arch", choices=["unet", "unetpp"], default=None,
                   help="fail unless the checkpoint holds this architecture")
    p.add_argument("--ssim-variant", choices=["windowed", "global"], default="windowed")
    p.add_argument("--split", default="test")
    p.add_argument("--out", default="reports/eval", help="report path stem (.csv and .json)")

    p = subs["bench"] = sub.add_parser("bench", help="time several training configs",
                                       formatter_class=fmt)
    p.add_argument("--manifest")
    p.add_argument("--configs", help="JSON list of named training configs, one flagged baseline")
    p.add_argument("--out", default="reports/bench", help="output directory")

    p = subs["render"] = sub.add_parser("render", help="noisy | U-Net | U-Net++ | clean grid",
                                        formatter_class=fmt)
    p.add_argument("--manifest")
    p.add_argument("--ckpts", help="UNET_CKPT,UNETPP_CKPT")
    p.add_argument("--ids", help="comma-separated record ids")
    p.add_argument("--out", default="reports/grid.png")

    for p in subs.values():
        p.add_argument("--config", default=None, help="JSON file of option defaults")
    return parser, subs


def _apply_config(sub: _Parser, path: str) -> None:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(body, dict):
        raise UsageError("config file must hold a JSON object")
    known = {a.dest for a in sub._actions} - {"help", "config"}
    values = {k.replace("-", "_"): v for k, v in body.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**values)


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


# -- commands ------------------------------------------------------------------

def cmd_prepare(args) -> int:
    try:
        fractions = tuple(float(v) for v in args.splits.split(","))
    except ValueError as exc:
        raise UsageError(f"bad --splits {args.splits!r}") from exc
    if len(fractions) != 3:
        raise UsageError("--splits needs three fractions")
    out = Path(args.out_manifest)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        records = gen_synthetic_phantoms(args.synthetic, args.size, args.seed)
    elif args.input_dir:
        records = []
        for path in sorted(Path(args.input_dir).iterdir()):
            if path.suffix.lower() not in (".png", ".pgm"):
                continue
            try:
                records.append(resize_bilinear(decode_image(path), args.size))
            except (FormatError, DecodeError) as exc:
                log.warning("skipping %s: %s", path, exc)
        if not records:
            raise UsageError(f"no decodable images in {args.input_dir}")
    else:
        raise UsageError("give --input-dir or --synthetic N")
    rows = write_clean_set(records, out.parent / "clean", out.parent)
    try:
        split = split_dataset([r.id for r in records], fractions, args.seed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    DatasetManifest(rows, split, args.size, args.seed, None).save(out)
    print(f"wrote {out}: {len(rows)} records "
          f"({len(split['train'])}/{len(split['val'])}/{len(split['test'])})")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    _require(args, "manifest")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    manifest = DatasetManifest.load(args.manifest)
    manifest.validate()
    spec = NoiseSpec(args.mean, args.sigma, args.seed, clamp=not args.no_clamp)
    corrupt_manifest(manifest, spec).save(args.manifest)
    print(f"corrupted {len(manifest.records)} images: mean {spec.mean} sigma {spec.sigma}")
    return EXIT_OK


def train_config_from_args(args) -> TrainConfig:
    try:
        return TrainConfig(arch=args.arch, base_ch=args.base_ch, depth=args.depth,
                           deep_supervision=args.deep_supervision, mode=args.mode,
                           workers=args.workers, amp=args.amp, epochs=args.epochs,
                           batch_per_worker=args.batch_per_worker, lr=args.lr,
                           init_seed=args.init_seed, data_seed=args.data_seed,
                           noise_seed=args.noise_seed, early_stop_patience=args.patience,
                           shuffle=args.shuffle, freeze_norm=args.freeze_norm,
                           backend=args.backend, out_dir=args.out_dir)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    _require(args, "manifest")
    cfg = train_config_from_args(args)
    manifest = DatasetManifest.load(args.manifest)
    result = train(manifest, cfg)
    for st in result.stats:
        print(f"epoch {st.epoch:3d}  train {st.train_loss:.5f}  val {st.val_loss:.5f}  "
              f"{st.wall_seconds:7.2f}s  skipped {st.skipped_steps}"
              + ("  *" if st.improved else ""))
    print(f"best val {result.best_val_loss:.5f} -> {result.best_checkpoint}")
    return EXIT_OK


def _train_seconds(ckpt: Path) -> float | None:
    log_path = ckpt.parent / "train_log.jsonl"
    if not log_path.exists():
        return None
    lines = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
    return sum(l["wall_seconds"] for l in lines) if lines else None


def cmd_evaluate(args) -> int:
    _require(args, "manifest", "ckpt")
    manifest = DatasetManifest.load(args.manifest)
    graph = load_graph(args.ckpt, args.arch)
    meta = read_checkpoint(args.ckpt).meta
    result = evaluate_testset(graph, manifest, args.split, args.ssim_variant)
    baseline = noisy_baseline(manifest, args.split, args.ssim_variant)
    sigma = manifest.noise.sigma if manifest.noise else 0.0
    row = ReportRow(sigma, graph.cfg.arch, meta.get("mode", "?"), meta.get("workers", 1),
                    bool(meta.get("amp", False)), result["psnr"], result["ssim"],
                    _train_seconds(Path(args.ckpt)))
    csv_path, json_path = emit_report([row], args.out)
    print(f"noise {sigma:g}  n={result['psnr'].n + result['psnr'].excluded}  "
          f"SSIM variant: {args.ssim_variant}")
    print(table_row("noisy input", baseline))
    print(table_row(graph.cfg.arch, result))
    if result["psnr"].excluded:
        print(f"({result['psnr'].excluded} images with infinite PSNR excluded)")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _slug(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name).strip("_") or "config"


def load_bench_configs(path: str) -> list[dict]:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read configs {path}: {exc}") from exc
    configs = body["configs"] if isinstance(body, dict) else body
    baselines = [c for c in configs if c.get("baseline")]
    if len(baselines) != 1:
        raise UsageError(f"configs must flag exactly one baseline, found {len(baselines)}")
    names = [c.get("name") for c in configs]
    if None in names or len(set(names)) != len(names):
        raise UsageError("every config needs a unique name")
    allowed = set(TrainConfig.field_names()) - {"out_dir"}
    for c in configs:
        extra = set(c) - allowed - {"name", "baseline"}
        if extra:
            raise UsageError(f"config {c['name']!r}: unknown keys {sorted(extra)}")
    return configs


def cmd_bench(args) -> int:
    _require(args, "manifest", "configs")
    configs = load_bench_configs(args.configs)
    manifest = DatasetManifest.load(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs, cfgs = {}, {}
    for c in configs:
        fields = {k: v for k, v in c.items() if k not in ("name", "baseline")}
        try:
            cfg = TrainConfig(**fields, out_dir=str(out / _slug(c["name"])))
        except (ConfigError, TypeError) as exc:
            raise UsageError(f"config {c['name']!r}: {exc}") from exc
        print(f"running {c['name']} ...", flush=True)
        runs[c["name"]] = train(manifest, cfg).stats
        cfgs[c["name"]] = cfg
    baseline = next(c["name"] for c in configs if c.get("baseline"))
    report = time_report(runs, baseline)
    print(report.format())
    sigma = manifest.noise.sigma if manifest.noise else 0.0
    rows = [ReportRow(sigma, cfgs[r.name].arch, cfgs[r.name].mode, cfgs[r.name].workers,
                      cfgs[r.name].amp, train_seconds=r.total_seconds, ts_percent=r.ts_percent)
            for r in report.rows]
    emit_report(rows, out / "timing")
    (out / "timing.txt").write_text(report.format() + "\n")
    return EXIT_OK


def cmd_render(args) -> int:
    _require(args, "manifest", "ckpts", "ids")
    manifest = DatasetManifest.load(args.manifest)
    paths = args.ckpts.split(",")
    if len(paths) != 2:
        raise UsageError("--ckpts needs two paths: unet,unetpp")
    ids = [i for i in args.ids.split(",") if i]
    known = {r["id"] for r in manifest.records}
    unknown = [i for i in ids if i not in known]
    if unknown or not ids:
        raise UsageError(f"unknown ids: {', '.join(unknown) or '(none given)'}")
    models = [load_graph(p) for p in paths]
    noisy, clean = manifest.load_pairs(ids)
    preds = [predict(m, noisy) for m in models]
    rows = [(noisy[k, 0], preds[0][k, 0], preds[1][k, 0], clean[k, 0]) for k in range(len(ids))]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    canvas = render_grid(rows, args.out)
    print(f"wrote {args.out} ({canvas.shape[0]}x{canvas.shape[1]})")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "corrupt": cmd_corrupt, "train": cmd_train,
            "evaluate": cmd_evaluate, "bench": cmd_bench, "render": cmd_render}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.config:
            _apply_config(subs[args.command], args.config)
            args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, DecodeError, LoadError, DomainError, SizeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, ReplicaDivergenceError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
