"""``adnet`` command line: synth, train, calibrate, route, restore, eval, gradcheck, decode.

Flag values resolve in this order: explicit flag, ``ADNET_<FLAG>`` environment
variable, ``--config`` file, built-in default. Failures print a single line
``error: <category>: <message>`` to stderr. Exit codes: 0 success, 1 failure,
2 usage or parameter error, 3 missing environment (decoder, filesystem).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from adnet.errors import ADNetError, IncompatibleError

log = logging.getLogger("adnet")

ENV_PREFIX = "ADNET_"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_ENVIRONMENT = 0, 1, 2, 3
ARTIFACTS_NAME = "artifacts.json"


class UsageError(ADNetError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message} (see {self.prog} --help)")


def sub_seed(seed: int, component: str) -> int:
    """Deterministic per-component seed derived from the single ``--seed``."""
    return int(np.random.SeedSequence([seed, zlib.crc32(component.encode())]).generate_state(1)[0])


@dataclass
class RunConfig:
    """Resolved paths and settings for one invocation."""

    command: str
    out_dir: Path | None = None
    seed: int = 0
    codec: object = None
    paths: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)

    @classmethod
    def from_args(cls, args, required=()) -> "RunConfig":
        missing = [f"--{name.replace('_', '-')}" for name in required if getattr(args, name, None) in (None, "")]
        if missing:
            raise UsageError(f"{args.command} requires {', '.join(missing)}")
        paths = {}
        for name in ("root", "train_manifest", "val_manifest", "manifest", "image", "lenet", "eg_restormer",
                     "tau_file", "init_checkpoint", "train_config"):
            value = getattr(args, name, None)
            if value:
                paths[name] = Path(value).expanduser().resolve()
        codec = None
        if hasattr(args, "decoder"):
            from adnet.codec import CodecBackendConfig

            codec = CodecBackendConfig(decoder=args.decoder, timeout=args.decoder_timeout)
        out_dir = getattr(args, "out_dir", None)
        out_dir = Path(out_dir).expanduser().resolve() if out_dir else None
        return cls(command=args.command, out_dir=out_dir,
                   seed=getattr(args, "seed", 0), codec=codec, paths=paths)

    def output(self, relative: str) -> Path:
        path = self.out_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        self.artifacts.append(relative)
        return path

    def write_artifacts(self, argv) -> Path:
        data = {"command": self.command, "argv": list(argv), "seed": self.seed,
                "paths": {k: str(v) for k, v in sorted(self.paths.items())},
                "codec": asdict(self.codec) if self.codec is not None else None,
                "artifacts": sorted(set(self.artifacts))}
        path = self.out_dir / ARTIFACTS_NAME
        path.write_text(json.dumps(data, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path


# -- parser --------------------------------------------------------------------

def _common(seed=False, decoder=False, out_dir=True):
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON file of flag defaults (flat, or keyed by subcommand)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity")
    if out_dir:
        p.add_argument("--out-dir", default="adnet-out", help="directory receiving all outputs")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="master seed; components derive sub-seeds from it")
    if decoder:
        from adnet.codec import DEFAULT_DECODER

        p.add_argument("--decoder", default=DEFAULT_DECODER,
                       help="decoder command template with {path}, or embedded:zxing / embedded:opencv")
        p.add_argument("--decoder-timeout", type=float, default=10.0, help="seconds per decode call")
    return p


def _tau_flags(p):
    p.add_argument("--tau", type=float, help="routing threshold in LV units")
    p.add_argument("--tau-file", help="JSON file written by 'calibrate' holding tau")


def build_parser() -> argparse.ArgumentParser:
    from adnet.synth import SynthParams
    from adnet.trainer import TRAIN_PRESETS, TrainConfig

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="adnet", description="Blurred QR code restoration with blur-severity routing.",
                     formatter_class=fmt)
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs.required = True
    sp = SynthParams()
    tc = TrainConfig()

    p = subs.add_parser("synth", help="synthesize a blurred/sharp QR dataset", formatter_class=fmt,
                        parents=[_common(seed=True)])
    p.add_argument("--root", help="dataset root (default: <out-dir>/data)")
    p.add_argument("--n-train", type=int, default=200, help="training pairs")
    p.add_argument("--n-test", type=int, default=40, help="test pairs")
    p.add_argument("--min-extent", type=int, default=sp.min_extent, help="smallest PSF extent in pixels")
    p.add_argument("--max-extent", type=int, default=sp.max_extent, help="largest PSF extent in pixels")
    p.add_argument("--max-noise", type=float, default=sp.max_noise_sigma, help="upper bound of noise sigma")
    p.add_argument("--qr-version", type=int, default=sp.version, help="QR symbol version")
    p.add_argument("--ec-level", default=sp.ec_level, choices=["L", "M", "Q", "H"], help="error correction")
    p.add_argument("--module-pixels", type=int, default=sp.module_pixels, help="pixels per QR module")
    p.add_argument("--canvas", type=int, default=sp.canvas, help="square image side in pixels")
    p.add_argument("--payload-length", type=int, default=sp.payload_length, help="payload characters")
    p.add_argument("--workers", type=int, default=1, help="parallel sample generators")

    p = subs.add_parser("train", help="train a restoration network", formatter_class=fmt,
                        parents=[_common(seed=True)])
    p.add_argument("--train-manifest", help="training split directory or manifest file")
    p.add_argument("--val-manifest", help="validation split for periodic PSNR")
    p.add_argument("--preset", default="desk-lenet", choices=sorted(TRAIN_PRESETS), help="training preset")
    p.add_argument("--train-config", help="JSON TrainConfig replacing the preset")
    p.add_argument("--iterations", type=int, help=f"optimizer steps (preset: {tc.iterations})")
    p.add_argument("--lr", type=float, help=f"initial learning rate (preset: {tc.initial_lr})")
    p.add_argument("--patch", type=int, help="single-stage patch size, overrides the schedule")
    p.add_argument("--batch", type=int, help="single-stage batch size, overrides the schedule")
    p.add_argument("--loss", choices=["l1", "l2"], help="reconstruction loss (preset: l1)")
    p.add_argument("--val-every", type=int, help="iterations between validations (default 10%% of run)")
    p.add_argument("--checkpoint-every", type=int, help="iterations between resumable checkpoints")
    p.add_argument("--init-checkpoint", help="initialize weights from this checkpoint")

    p = subs.add_parser("calibrate", help="fit the routing threshold tau from LENet decodability",
                        formatter_class=fmt, parents=[_common(decoder=True)])
    p.add_argument("--manifest", help="calibration split")
    p.add_argument("--lenet", help="LENet checkpoint")

    p = subs.add_parser("route", help="print the routing decision for one image", formatter_class=fmt,
                        parents=[_common(out_dir=False)])
    p.add_argument("--image", help="input PNG")
    _tau_flags(p)

    p = subs.add_parser("restore", help="run the routed pipeline on an image or a split", formatter_class=fmt,
                        parents=[_common(decoder=True)])
    p.add_argument("--image", help="single input PNG")
    p.add_argument("--manifest", help="split to restore instead of one image")
    p.add_argument("--lenet", help="LENet checkpoint")
    p.add_argument("--eg-restormer", help="EG-Restormer checkpoint")
    _tau_flags(p)

    p = subs.add_parser("eval", help="score a model or pipeline on a split", formatter_class=fmt,
                        parents=[_common(seed=True, decoder=True)])
    p.add_argument("--manifest", help="test split")
    p.add_argument("--model", default="lenet", choices=["identity", "lenet", "eg-restormer", "adnet", "random"],
                   help="what to evaluate; 'random' routes by coin flip")
    p.add_argument("--lenet", help="LENet checkpoint")
    p.add_argument("--eg-restormer", help="EG-Restormer checkpoint")
    _tau_flags(p)
    p.add_argument("--sheet-rows", type=int, default=8, help="triptychs in the contact sheet (0 disables it)")

    p = subs.add_parser("gradcheck", help="finite-difference gradient suite", formatter_class=fmt,
                        parents=[_common(seed=True, out_dir=False)])
    p.add_argument("--skip-models", action="store_true", help="check ops and blocks only")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error allowed")

    p = subs.add_parser("decode", help="probe the decoder backend, optionally decoding one image",
                        formatter_class=fmt, parents=[_common(decoder=True, out_dir=False)])
    p.add_argument("--image", help="PNG to decode after the probe")
    parser.subcommands = subs.choices
    return parser


def _file_defaults(path, command) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read --config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"--config {path} must hold a JSON object")
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    flat.update(data.get(command, {}))
    return {k.replace("-", "_"): v for k, v in flat.items()}


def _env_value(action, raw):
    if action.nargs == 0:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return action.type(raw) if action.type else raw


def parse_args(argv):
    parser = build_parser()
    pre = parser.parse_args(argv)
    sub = parser.subcommands[pre.command]
    defaults = {}
    if getattr(pre, "config", None):
        known = {a.dest for a in sub._actions}
        file_vals = _file_defaults(pre.config, pre.command)
        unknown = sorted(set(file_vals) - known)
        if unknown:
            raise UsageError(f"--config has unknown keys for {pre.command}: {unknown}")
        defaults.update(file_vals)
    for action in sub._actions:
        env = os.environ.get(ENV_PREFIX + action.dest.upper())
        if env is not None and action.dest not in ("help", "config"):
            try:
                defaults[action.dest] = _env_value(action, env)
            except ValueError as exc:
                raise UsageError(f"{ENV_PREFIX}{action.dest.upper()}={env!r}: {exc}") from exc
    if not defaults:
        return pre
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# -- helpers -------------------------------------------------------------------

def _decoder(run: RunConfig):
    from adnet.codec import make_decoder

    return make_decoder(run.codec, probe=True)


def _load_model(path, kind: str):
    from adnet.models import load_checkpoint

    model = load_checkpoint(path).build()
    if model.config.kind != kind:
        raise IncompatibleError(f"{path} holds a {model.config.kind} model, expected {kind}", field="kind")
    return model


def _tau(args, run: RunConfig) -> float:
    from adnet.routing import load_tau

    if args.tau is not None:
        return float(args.tau)
    if args.tau_file:
        return load_tau(run.paths["tau_file"])
    raise UsageError(f"{args.command} requires --tau or --tau-file")


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args, run):
    from adnet.synth import SynthParams, build_dataset

    params = SynthParams(version=args.qr_version, ec_level=args.ec_level, module_pixels=args.module_pixels,
                         canvas=args.canvas, payload_length=args.payload_length, min_extent=args.min_extent,
                         max_extent=args.max_extent, max_noise_sigma=args.max_noise)
    root = run.paths.get("root") or run.out_dir / "data"
    train, test = build_dataset(root, args.n_train, args.n_test, params=params, seed=sub_seed(run.seed, "synth"),
                                workers=args.workers)
    for split in (train, test):
        rel = os.path.relpath(split.root / "manifest", run.out_dir)
        run.artifacts.append(rel)
    print(f"train={len(train)} test={len(test)} root={root}")
    return EXIT_OK


def cmd_train(args, run):
    from adnet.synth import read_manifest
    from adnet.trainer import TRAIN_PRESETS, TrainConfig, train

    if "train_config" in run.paths:
        config = TrainConfig.from_file(run.paths["train_config"])
    else:
        config = TRAIN_PRESETS[args.preset]()
    data = config.to_dict()
    data["seed"] = sub_seed(run.seed, "train.sampler")
    data["model"]["init_seed"] = sub_seed(run.seed, "train.init") % (2 ** 31)
    for flag, key in (("iterations", "iterations"), ("lr", "initial_lr"), ("loss", "loss"),
                      ("val_every", "val_every"), ("checkpoint_every", "checkpoint_every")):
        if getattr(args, flag) is not None:
            data[key] = getattr(args, flag)
    if args.patch is not None or args.batch is not None:
        first = data["schedule"][0]
        data["schedule"] = [[args.patch or first[0], args.batch or first[1], 0]]
    if "init_checkpoint" in run.paths:
        data["init_checkpoint"] = str(run.paths["init_checkpoint"])
    config = TrainConfig.from_dict(data)

    train_m = read_manifest(run.paths["train_manifest"])
    val_m = read_manifest(run.paths["val_manifest"]) if "val_manifest" in run.paths else None
    out = run.out_dir / "train"
    result = train(config, train_m, val_m, out_dir=out, progress=True)
    for name in ("train_config.json", "train_log.jsonl", "final.ckpt", "best.ckpt", "last.ckpt"):
        if (out / name).is_file():
            run.artifacts.append(f"train/{name}")
    ratio = result.probe_l1_final / result.probe_l1_initial if result.probe_l1_initial else float("nan")
    best = f" best_val_psnr={result.best_val_psnr:.3f}" if result.best_val_psnr is not None else ""
    print(f"probe_l1 {result.probe_l1_initial:.5f} -> {result.probe_l1_final:.5f} (ratio {ratio:.3f}){best}")
    print(f"checkpoint={result.final_checkpoint}")
    return EXIT_OK


def cmd_calibrate(args, run):
    from adnet.models import LENET
    from adnet.routing import (
        calibrate_threshold,
        collect_calibration_records,
        save_tau,
        write_calibration_report,
    )
    from adnet.synth import read_manifest

    decoder = _decoder(run)
    lenet = _load_model(run.paths["lenet"], LENET)
    manifest = read_manifest(run.paths["manifest"])
    records = collect_calibration_records(manifest, lenet.restore, decoder)
    try:
        cal = calibrate_threshold(records)
    except ADNetError:
        write_calibration_report(records, None, run.output("calibration.json"))
        raise
    write_calibration_report(records, cal, run.output("calibration.json"))
    save_tau(cal.tau, run.output("tau.json"), separable=cal.separable, lenet=str(run.paths["lenet"]))
    print(f"tau={cal.tau:.6g} separable={str(cal.separable).lower()} decodable={cal.n_decodable} "
          f"non_decodable={cal.n_non_decodable}")
    return EXIT_OK


def cmd_route(args, run):
    from adnet.routing import laplacian_variance, route
    from adnet.synth import load_image

    tau = _tau(args, run)
    decision = route(laplacian_variance(load_image(run.paths["image"])), tau)
    print(f"v={decision.v:.6g} tau={decision.tau:.6g} branch={decision.branch.network}")
    return EXIT_OK


def _pipeline(args, run, decoder):
    from adnet.models import EG_RESTORMER, LENET
    from adnet.routing import ADNetPipeline, RandomRoutingPipeline

    lenet = _load_model(run.paths["lenet"], LENET)
    eg = _load_model(run.paths["eg_restormer"], EG_RESTORMER)
    if getattr(args, "model", "adnet") == "random":
        return RandomRoutingPipeline(lenet.restore, eg.restore, seed=sub_seed(run.seed, "eval.random"),
                                     decoder=decoder)
    return ADNetPipeline(lenet.restore, eg.restore, _tau(args, run), decoder)


def cmd_restore(args, run):
    from adnet.synth import load_image, read_manifest, save_image

    if bool(args.image) == bool(args.manifest):
        raise UsageError("restore needs exactly one of --image or --manifest")
    for name in ("lenet", "eg_restormer"):
        if name not in run.paths:
            raise UsageError(f"restore requires --{name.replace('_', '-')}")
    decoder = _decoder(run)
    pipe = _pipeline(args, run, decoder)
    if args.image:
        items = [("restored.png", run.paths["image"])]
    else:
        manifest = read_manifest(run.paths["manifest"])
        items = [(f"restored/{Path(e.blur).name}", manifest.path(e.blur)) for e in manifest.entries]
    traces = []
    for rel, src in items:
        out = pipe(load_image(src))
        save_image(out.image, run.output(rel))
        traces.append({"input": str(src), "output": rel, "v": out.decision.v, "tau": out.decision.tau,
                       "branch": out.decision.branch.network, "trace": out.trace,
                       "status": out.decode.status.value, "payload": out.decode.payload})
    run.output("traces.json").write_text(json.dumps(traces, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    decoded = sum(t["status"] == "decoded" for t in traces)
    print(f"restored={len(traces)} decoded={decoded}")
    if args.image:
        t = traces[0]
        print(f"trace={'+'.join(t['trace'])} status={t['status']}" + (f" payload={t['payload']}" if t["payload"]
                                                                        else ""))
    return EXIT_OK


def cmd_eval(args, run):
    from adnet.codec import backend_identity
    from adnet.metrics import evaluate
    from adnet.models import EG_RESTORMER, LENET
    from adnet.report import contact_sheet
    from adnet.synth import read_manifest

    decoder = _decoder(run)
    manifest = read_manifest(run.paths["manifest"])
    if args.model == "identity":
        restorer = lambda image: image  # noqa: E731
    elif args.model in ("lenet", "eg-restormer"):
        key, kind = ("lenet", LENET) if args.model == "lenet" else ("eg_restormer", EG_RESTORMER)
        if key not in run.paths:
            raise UsageError(f"eval --model {args.model} requires --{key.replace('_', '-')}")
        restorer = _load_model(run.paths[key], kind).restore
    else:
        for name in ("lenet", "eg_restormer"):
            if name not in run.paths:
                raise UsageError(f"eval --model {args.model} requires --{name.replace('_', '-')}")
        restorer = _pipeline(args, run, decoder)
    report, outputs = evaluate(restorer, manifest, decoder, name=args.model, backend=backend_identity(decoder),
                               keep_outputs=True)
    report.write(run.output("report.json"))
    if args.sheet_rows > 0:
        contact_sheet(outputs, run.output("contact_sheet.png"), rows=report.rows, max_rows=args.sheet_rows,
                      title=f"{args.model} on {manifest.split}")
    agg = report.aggregates
    print(f"model={args.model} count={agg['count']} dr={agg['dr_percent']:.2f}% psnr={agg['mean_psnr']:.3f} "
          f"ssim={agg['mean_ssim']:.4f} avg_time={agg['avg_time_s']:.4f}s backend_errors={agg['backend_errors']}")
    return EXIT_OK


def cmd_gradcheck(args, run):
    from adnet.diagnostics import format_results, gradient_suite, suite_passed

    results = gradient_suite(seed=run.seed, include_models=not args.skip_models)
    print(format_results(results, args.tolerance))
    ok = suite_passed(results, args.tolerance)
    worst = max(results, key=lambda r: r.max_rel_error)
    print(f"{'passed' if ok else 'failed'}: worst {worst.name} {worst.max_rel_error:.3e}")
    return EXIT_OK if ok else EXIT_FAILURE


def cmd_decode(args, run):
    from adnet.codec import backend_identity
    from adnet.synth import load_image

    decoder = _decoder(run)
    print(json.dumps(backend_identity(decoder), sort_keys=True))
    if not args.image:
        print("probe=ok")
        return EXIT_OK
    result = decoder.decode(load_image(run.paths["image"]))
    print(f"status={result.status.value}" + (f" payload={result.payload}" if result.ok else ""))
    return EXIT_OK if result.ok else EXIT_FAILURE


COMMANDS = {
    "synth": (cmd_synth, ()),
    "train": (cmd_train, ("train_manifest",)),
    "calibrate": (cmd_calibrate, ("manifest", "lenet")),
    "route": (cmd_route, ("image",)),
    "restore": (cmd_restore, ()),
    "eval": (cmd_eval, ("manifest",)),
    "gradcheck": (cmd_gradcheck, ()),
    "decode": (cmd_decode, ()),
}
_NO_OUTPUT = ("route", "gradcheck", "decode")


def _exit_code(exc: ADNetError) -> int:
    if exc.category in ("usage", "parameter"):
        return EXIT_USAGE
    if exc.category == "environment":
        return EXIT_ENVIRONMENT
    return EXIT_FAILURE


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
        fn, required = COMMANDS[args.command]
        run = RunConfig.from_args(args, required)
        if args.command not in _NO_OUTPUT:
            try:
                run.out_dir.mkdir(parents=True, exist_ok=True)
            except OSError as exc:
                from adnet.errors import BackendUnavailableError

                raise BackendUnavailableError(f"cannot create --out-dir {run.out_dir}: {exc}") from exc
        code = fn(args, run)
        if args.command not in _NO_OUTPUT:
            run.write_artifacts(argv)
        return code
    except ADNetError as exc:
        message = " ".join(str(exc).split())
        print(f"error: {exc.category}: {message}", file=sys.stderr)
        return _exit_code(exc)
    except KeyboardInterrupt:
        print("error: interrupted: stopped by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
