"""``csifall`` command line: synth, train, eval, loeo, stream, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import os
import socket
import sys
import time
from contextlib import ExitStack
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .config import ConfigError, RunConfig, load_config
from .ingest import iter_frames, read_replay, write_replay, write_replay_csv
from .model import CheckpointError, load_checkpoint, model_forward
from .preprocess import DatasetIndex, channel_standardize
from .synth import EventKind, generate_dataset, generate_recording, make_environment
from .training import ConfigurationError, evaluate, loeo_folds, run_loeo, train_model, write_loss_log
from .stream import run_live

log = logging.getLogger("csifall")


class UsageError(Exception):
    pass


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--seed", type=int, help="seed for all randomness (default: $CSIFALL_SEED)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. training.epochs=3 (repeatable)")
    common.add_argument("--run-dir", help="output directory (default: $CSIFALL_RUN_DIR/<cmd>-<hash>-<time>)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="csifall", description="WiFi CSI fall detection pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset or replay recording")
    s.add_argument("--out", help="dataset directory, or replay file with --recording")
    s.add_argument("--recording", choices=[k.value for k in EventKind], help="emit one replay recording instead")
    s.add_argument("--env", default=None, help="environment id for --recording (default: first)")
    s.add_argument("--duration", type=float, default=12.0)
    s.add_argument("--onset", type=float, default=6.0)

    s = sub.add_parser("train", parents=[common], help="train on a dataset index")
    s.add_argument("--index", required=True)
    s.add_argument("--holdout", help="environment id excluded from training")

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--env", help="evaluate only this environment")
    s.add_argument("--tta", action="store_true", help="average over test-time augmented versions")

    s = sub.add_parser("loeo", parents=[common], help="leave-one-environment-out sweep")
    s.add_argument("--index", help="dataset index (default: generate from the synth section)")
    s.add_argument("--tta", action="store_true")

    s = sub.add_parser("stream", parents=[common], help="live inference over a replay file or TCP stream")
    s.add_argument("--checkpoint", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--replay")
    src.add_argument("--tcp", metavar="HOST:PORT", help="read the binary replay format from a TCP peer")
    s.add_argument("--output-tcp", metavar="HOST:PORT", help="send NDJSON records to a TCP peer instead of stdout")
    s.add_argument("--threaded", action="store_true", help="producer/consumer mode with a bounded queue")

    s = sub.add_parser("inspect", parents=[common], help="dump DVG mask and CBAM maps for one sample")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--index", required=True)
    s.add_argument("--sample", required=True)
    s.add_argument("--out", help="output directory (default: run dir)")
    return p


def effective_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key] = _parse_value(raw)
    seed = args.seed if args.seed is not None else os.environ.get("CSIFALL_SEED")
    if seed is not None:
        overrides["training.seed"] = int(seed)
        overrides["synth.seed"] = int(seed)
    if getattr(args, "tta", False):
        overrides["training.tta"] = True
    return load_config(args.config, overrides)


def make_run_dir(args, cfg: RunConfig) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        base = Path(os.environ.get("CSIFALL_RUN_DIR", "runs"))
        path = base / f"{args.command}-{cfg.digest()}-{time.strftime('%Y%m%d-%H%M%S')}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(cfg.to_json())
    return path


def _hostport(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def cmd_synth(args, cfg: RunConfig, run_dir: Path) -> int:
    spec = cfg.synth
    if args.recording:
        envs = {e.env_id: e for e in spec.environments}
        env_spec = envs[args.env] if args.env else spec.environments[0]
        if args.env and args.env not in envs:
            raise UsageError(f"unknown environment {args.env!r}")
        rng = np.random.default_rng([spec.seed, 99])
        frames, burst = generate_recording(EventKind(args.recording), make_environment(env_spec, spec), rng,
                                           args.duration, args.onset, spec)
        out = Path(args.out) if args.out else run_dir / f"{args.recording}.csir"
        if out.suffix.lower() == ".csv":
            write_replay_csv(out, frames)
        else:
            write_replay(out, frames, spec.rate_hz)
        print(json.dumps({"replay": str(out), "frames": len(frames), "burst_s": burst}))
        return 0
    out = Path(args.out) if args.out else run_dir / "data"
    index = generate_dataset(spec, out)
    print(json.dumps({"index": str(out / "index.json"), "samples": len(index)}))
    return 0


def cmd_train(args, cfg: RunConfig, run_dir: Path) -> int:
    index = DatasetIndex.read(args.index)
    ids = [s.sample_id for s in index.samples if s.environment_id != args.holdout]
    ckpt = run_dir / "checkpoint.ckpt"
    result = train_model(cfg.training, ids, index, cfg.model, ckpt)
    write_loss_log(run_dir / "loss_log.csv", result.loss_log)
    print(json.dumps({"checkpoint": str(ckpt), "epochs": len(result.loss_log),
                      "final_train_loss": result.loss_log[-1]["train_loss"] if result.loss_log else None}))
    return 0


def cmd_eval(args, cfg: RunConfig, run_dir: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    index = DatasetIndex.read(args.index)
    ids = [s.sample_id for s in index.samples if args.env is None or s.environment_id == args.env]
    metrics = evaluate(model, ids, index, cfg.training.tta, cfg.training.tta_k, cfg.training.seed)
    doc = {"checkpoint": str(args.checkpoint), "tta": cfg.training.tta,
           "tta_k": cfg.training.tta_k if cfg.training.tta else 1, "metrics": metrics.to_dict()}
    _write_json(run_dir / "metrics.json", doc)
    print(json.dumps(doc["metrics"]))
    return 0


def cmd_loeo(args, cfg: RunConfig, run_dir: Path) -> int:
    if args.index:
        index = DatasetIndex.read(args.index)
    else:
        index = generate_dataset(cfg.synth, run_dir / "data")
    report = run_loeo(index, cfg.training, cfg.model, run_dir, loeo_folds(index))
    print(json.dumps(report["aggregate"]))
    return 0


def cmd_stream(args, cfg: RunConfig, run_dir: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    with ExitStack() as stack:
        if args.replay:
            source = read_replay(args.replay)
        else:
            sock = stack.enter_context(socket.create_connection(_hostport(args.tcp)))
            source = iter_frames(stack.enter_context(sock.makefile("rb")))
        if args.output_tcp:
            out_sock = stack.enter_context(socket.create_connection(_hostport(args.output_tcp)))
            out = stack.enter_context(out_sock.makefile("w", encoding="utf-8"))
        else:
            out = sys.stdout
        for record in run_live(source, model, cfg.stream, threaded=args.threaded):
            out.write(record.to_json() + "\n")
            out.flush()
    return 0


def cmd_inspect(args, cfg: RunConfig, run_dir: Path) -> int:
    model = load_checkpoint(args.checkpoint)
    index = DatasetIndex.read(args.index)
    if args.sample not in index.by_id():
        raise UsageError(f"unknown sample {args.sample!r}")
    x = channel_standardize(index.load(args.sample))
    probs, diag = model_forward(x, model, with_diagnostics=True)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "dvg_mask" in diag:
        mask = diag["dvg_mask"][0].numpy()
        for c in range(mask.shape[0]):
            path = out / f"dvg_mask_ch{c}.csv"
            np.savetxt(path, mask[c], delimiter=",", fmt="%.8g")
            written.append(path.name)
    if "cbam_channel" in diag:
        np.savetxt(out / "cbam_channel.csv", diag["cbam_channel"][0].reshape(1, -1).numpy(), delimiter=",", fmt="%.8g")
        np.savetxt(out / "cbam_spatial.csv", diag["cbam_spatial"][0, 0].numpy(), delimiter=",", fmt="%.8g")
        written += ["cbam_channel.csv", "cbam_spatial.csv"]
    print(json.dumps({"sample": args.sample, "p_fall": probs.p_fall, "p_nonfall": probs.p_nonfall,
                      "files": written, "dir": str(out)}))
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "loeo": cmd_loeo,
    "stream": cmd_stream,
    "inspect": cmd_inspect,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = effective_config(args)
    except (ConfigError, ValidationError, ValueError) as exc:
        print(f"csifall: invalid configuration: {exc}", file=sys.stderr)
        return 2
    try:
        run_dir = make_run_dir(args, cfg)
        return COMMANDS[args.command](args, cfg, run_dir)
    except (UsageError, ConfigurationError, CheckpointError) as exc:
        print(f"csifall: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except Exception as exc:  # runtime failure -> diagnostic + exit 1
        log.debug("failure", exc_info=True)
        print(f"csifall: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
