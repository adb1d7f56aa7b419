"""Command-line entry point: ``abductive-dpo {gen-data,train,eval,ablate,gradcheck,replay}``.

Results go to stdout as JSON; logs go to stderr.  Exit codes: 0 ok, 2 bad
configuration, 3 I/O failure, 4 numeric failure (divergence or a failed gradient
check).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import fields, replace
from importlib import metadata
from pathlib import Path

import yaml

from . import gradcheck
from . import tensor as T
from .datagen import GenConfig, GenerationError, emit_dataset, file_sha256, read_jsonl, synthesize_corpus
from .evalkit import evaluate, run_delta_ablation, run_dpop_penalty_ablation, run_lambda_ablation
from .lm import LmPolicy, clone_frozen, clone_trainable
from .pipeline import MleConfig, build, pretrain_base
from .trainer import TrainConfig, TrainingDiverged, finetune

log = logging.getLogger("abductive_dpo")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ROOT_ENV = "ABDUCTIVE_DPO_OUT"
MANIFEST = "manifest.json"

DEFAULTS = {
    "seed": 0,
    "split_ratio": 0.8,
    "gen": {},
    "mle": {},
    "train": {},
    "ablate": {
        "lambda_grid": [0.0, 0.25, 0.5, 0.75, 1.0],
        "delta_grid": [0.1, 1.0],
        "dpop_grid": [0.0, 0.5, 1.0],
        "delta_epochs": 5,
    },
}


class ConfigError(ValueError):
    pass


class RunIOError(OSError):
    pass


def _version() -> str:
    try:
        return metadata.version("abductive-dpo")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------- configuration


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _apply_override(cfg: dict, item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | None, overrides=()) -> dict:
    """Defaults, then the file (YAML or JSON), then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {p}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {p} must be a mapping at top level")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        _apply_override(cfg, item)
    unknown = set(cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _gen_config(cfg: dict) -> GenConfig:
    d = {"seed": cfg["seed"], **cfg["gen"]}
    return _build(GenConfig, d, "gen")


def _mle_config(cfg: dict) -> MleConfig:
    return _build(MleConfig, cfg["mle"], "mle")


def _train_config(cfg: dict) -> TrainConfig:
    d = {"seed": cfg["seed"], **cfg["train"]}
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def _build(cls, d: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{section}: unknown options {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


# ---------------------------------------------------------------- manifests


def _hashes(paths) -> dict:
    return {str(p): file_sha256(p) for p in paths}


def write_manifest(out_dir: Path, command: str, args: dict, cfg: dict | None, inputs, outputs, started: float):
    manifest = {
        "tool": "abductive-dpo",
        "version": _version(),
        "command": command,
        "args": args,
        "config": cfg,
        "seeds": None if cfg is None else {"seed": cfg["seed"]},
        "inputs": _hashes(inputs),
        "outputs": {Path(p).name: file_sha256(p) for p in outputs},
        "duration_s": round(time.time() - started, 3),
    }
    tmp = out_dir / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    tmp.replace(out_dir / MANIFEST)
    return manifest


def _out_dir(arg: str | None, default_name: str) -> Path:
    """``--out`` wins; otherwise a folder under ``$ABDUCTIVE_DPO_OUT`` (or ./runs)."""
    p = Path(arg) if arg else Path(os.environ.get(OUT_ROOT_ENV, "runs")) / default_name
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunIOError(f"cannot create output directory {p}: {exc}") from exc
    return p


def _emit(obj):
    sys.stdout.write(json.dumps(obj, sort_keys=False) + "\n")
    sys.stdout.flush()


def _load_policy(path) -> LmPolicy:
    try:
        return LmPolicy.load(path)
    except FileNotFoundError as exc:
        raise RunIOError(f"checkpoint not found: {path}") from exc
    except (ValueError, KeyError) as exc:
        raise RunIOError(f"unreadable checkpoint {path}: {exc}") from exc


def _load_split(data_dir: Path, split: str):
    path = data_dir / f"{split}.jsonl"
    if not path.is_file():
        raise RunIOError(f"dataset file not found: {path}")
    try:
        return read_jsonl(path), path
    except ValueError as exc:
        raise RunIOError(f"malformed dataset: {exc}") from exc


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set)
    gen, mle = _gen_config(cfg), _mle_config(cfg)
    out = _out_dir(args.out, "data")
    built = build(gen, mle, split_ratio=cfg["split_ratio"], split_seed=cfg["seed"])
    train, held = built.pools.filtered(gen.delta)
    if not train or not held:
        raise GenerationError(f"delta={gen.delta} leaves an empty split ({len(train)} train, {len(held)} eval)")
    paths = emit_dataset(train + held, out, cfg["split_ratio"], cfg["seed"])
    base_path, reader_path = out / "base.json", out / "reader.json"
    built.base.save(base_path)
    built.reader.save(reader_path)
    outputs = [*paths, base_path, reader_path]
    write_manifest(out, "gen-data", {}, cfg, [], outputs, started)
    _emit({
        "out": str(out),
        "candidates": built.pools.n_candidates,
        "stage1": built.pools.n_stage1,
        "train": len(train),
        "eval": len(held),
    })
    return EXIT_OK


def _base_for(cfg: dict, data_dir: Path) -> tuple[LmPolicy, list]:
    """Reuse ``base.json`` from the data directory, else pre-train one from the config."""
    path = data_dir / "base.json"
    if path.is_file():
        return _load_policy(path), [path]
    log.info("no base checkpoint in %s, pre-training", data_dir)
    return pretrain_base(synthesize_corpus(_gen_config(cfg)), _mle_config(cfg)), []


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set)
    tcfg = _train_config(cfg)
    data_dir = Path(args.data)
    train, train_path = _load_split(data_dir, "train")
    base, base_inputs = _base_for(cfg, data_dir)
    out = _out_dir(args.out, "train")
    policy, dyn = finetune(clone_trainable(base), clone_frozen(base), train, tcfg)
    ckpt, dyn_path = out / "policy.json", out / "dynamics.csv"
    policy.save(ckpt)
    dyn.to_csv(dyn_path)
    write_manifest(out, "train", {"data": str(data_dir)}, cfg, [train_path, *base_inputs], [ckpt, dyn_path], started)
    _emit({"out": str(out), "steps": len(dyn), "final_loss": dyn.rows[-1]["loss"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    policy = _load_policy(args.checkpoint)
    records, _ = _load_split(Path(args.data), args.split)
    report = evaluate(policy, records)
    sys.stdout.write(report.to_json(per_item=args.per_item) + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = time.time()
    cfg = load_config(args.config, args.set)
    tcfg = _train_config(cfg)
    ab = cfg["ablate"]
    data_dir = Path(args.data)
    train, train_path = _load_split(data_dir, "train")
    held, eval_path = _load_split(data_dir, "eval")
    base, base_inputs = _base_for(cfg, data_dir)
    out = _out_dir(args.out, f"ablate-{args.kind}")
    csv_path = out / f"{args.kind}.csv"
    try:
        if args.kind == "lambda":
            rows = run_lambda_ablation(base, train, held, tcfg, ab["lambda_grid"], csv_path)
        elif args.kind == "dpop":
            rows = run_dpop_penalty_ablation(base, train, held, tcfg, ab["dpop_grid"], csv_path)
        else:
            rows = run_delta_ablation(base, _delta_datasets(train, held, ab["delta_grid"]),
                                      _delta_config(tcfg, ab), csv_path)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"ablate: {exc}") from exc
    inputs = [train_path, eval_path, *base_inputs]
    write_manifest(out, "ablate", {"kind": args.kind, "data": str(data_dir)}, cfg, inputs, [csv_path], started)
    _emit({"out": str(out), "csv": str(csv_path), "rows": len(rows)})
    return EXIT_OK


def _delta_config(tcfg: TrainConfig, ab: dict) -> TrainConfig:
    return replace(tcfg, epochs=int(ab["delta_epochs"]))


def _delta_datasets(train, held, grid) -> dict:
    """Sub-datasets by stored margin.  Deltas below the generation delta add nothing."""
    out = {}
    for d in sorted(float(x) for x in grid):
        if d < 0:
            raise ConfigError("delta_grid entries must be non-negative")
        tr = [r for r in train if r.margin >= d]
        ev = [r for r in held if r.margin >= d]
        if not tr or not ev:
            raise ConfigError(f"delta {d} leaves an empty split")
        out[d] = (tr, ev)
    return out


def cmd_gradcheck(args) -> int:
    scopes = ["ops", "lm", "losses"] if args.scope == "all" else [args.scope]
    failed = False
    for scope in scopes:
        for res in gradcheck.run(scope, trials=args.trials, seed=args.seed):
            _emit({"scope": scope, "name": res.name, "max_rel_error": res.max_rel_error, "ok": res.ok})
            failed |= not res.ok
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_replay(args) -> int:
    """Re-run a recorded command into a fresh directory and compare output hashes."""
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise RunIOError(f"manifest not found: {args.manifest}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {args.manifest} is not JSON: {exc}") from exc
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).is_file() or file_sha256(path) != digest:
            raise RunIOError(f"input {path} is missing or changed since the recorded run")
    out = _out_dir(args.out, "replay")
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "config.json"
        cfg_path.write_text(json.dumps(manifest["config"]), encoding="utf-8")
        cmd = manifest["command"]
        rec = manifest.get("args", {})
        argv = [cmd]
        if cmd == "ablate":
            argv.append(rec["kind"])
        argv += ["--config", str(cfg_path), "--out", str(out)]
        if "data" in rec:
            argv += ["--data", rec["data"]]
        ns = build_parser().parse_args(argv)
        saved = sys.stdout
        sys.stdout = sys.stderr  # the replayed command's summary is not this command's result
        try:
            code = ns.func(ns)
        finally:
            sys.stdout = saved
    if code != EXIT_OK:
        return code
    fresh = json.loads((out / MANIFEST).read_text(encoding="utf-8"))["outputs"]
    mismatched = sorted(k for k in manifest["outputs"] if fresh.get(k) != manifest["outputs"][k])
    _emit({"out": str(out), "identical": not mismatched, "mismatched": mismatched})
    return EXIT_OK if not mismatched else EXIT_NUMERIC


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="abductive-dpo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    p.add_argument("--version", action="version", version=_version())
    sub = p.add_subparsers(dest="command", required=True)

    def configurable(sp):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=1e-3 (repeatable)")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<command>)")

    sp = sub.add_parser("gen-data", help="build the synthetic dataset and its base model")
    configurable(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="preference fine-tuning")
    configurable(sp)
    sp.add_argument("--data", required=True, help="directory written by gen-data")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="print accuracy and abductive accuracy as JSON")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="eval", choices=("train", "eval"))
    sp.add_argument("--per-item", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="lambda, delta or DPOP-penalty sweep to CSV")
    sp.add_argument("kind", choices=("lambda", "delta", "dpop"))
    configurable(sp)
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("scope", choices=("ops", "lm", "losses", "all"))
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("replay", help="re-run a command from its manifest and compare hashes")
    sp.add_argument("manifest")
    sp.add_argument("--out", help="where the replay writes (default: $%s/replay)" % OUT_ROOT_ENV)
    sp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )
    try:
        return args.func(args)
    except (ConfigError, GenerationError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (TrainingDiverged, T.NumericFault) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
