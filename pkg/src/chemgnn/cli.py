"""Command-line entry point.

Subcommands::

    chemgnn gen        --family {pc,cg,ucg,mol} --out data.json
    chemgnn train      --config train.json --data data.json --out-dir run/
    chemgnn eval       --checkpoint run/checkpoint.json|oracle --data data.json --out-dir ev/
    chemgnn scan       --checkpoint ... --data ... --system-id ID --out scan.csv
    chemgnn contrib    --checkpoint ... --data ... --system-id ID --out contrib.csv
    chemgnn experiment {size-gen,reduced,ablation} --config exp.json --data ... --out-dir exp/
    chemgnn replay     manifest.json

Every artifact-producing command writes a JSON manifest next to its outputs
(``<out>.manifest.json`` for single files, ``manifest.json`` inside an
output directory).  ``replay`` re-executes the recorded command line and
checks that the output hashes match.

Config files are JSON objects carrying a ``schema`` tag
(``chemgnn-gen/1``, ``chemgnn-train/1``, ``chemgnn-experiment/1``); any key
the schema does not know is an error.  All randomness is seeded by
``--seed``, which overrides the seed stored in a config file.

Errors are reported on stderr as one JSON line
``{"error": <kind>, "message": <text>}``.  Usage problems (bad flags,
missing files, schema mismatches) exit with status 2, failures while
running exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path


from .chemgraph import Dataset, scale_system
from .datagen import DEFAULT_GRID, FamilyConfig, OracleParams, generate_family
from .errors import ChemGnnError, ConfigurationError, DataError
from .harness import (
    LOG_COLUMNS,
    ModelPredictor,
    OraclePredictor,
    TrainConfig,
    ablation,
    atom_contributions,
    evaluate,
    moving_atom_sweep,
    reduced_training,
    sha256_file,
    size_generalization,
    split,
    stable_geometry,
    train,
    write_csv,
    write_manifest,
)
from .models import load_checkpoint

SCHEMAS = {"gen": "chemgnn-gen/1", "train": "chemgnn-train/1", "experiment": "chemgnn-experiment/1"}

log = logging.getLogger("chemgnn")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config files -----------------------------------------------------------------


def read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def read_config(path, kind: str) -> dict:
    blob = read_json(path)
    if not isinstance(blob, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    schema = blob.pop("schema", None)
    if schema != SCHEMAS[kind]:
        raise UsageError(f"{path}: expected schema {SCHEMAS[kind]!r}, got {schema!r}")
    return blob


def train_config(d: dict, seed: int | None, where: str) -> TrainConfig:
    try:
        cfg = TrainConfig.from_dict(d)
    except (ConfigurationError, TypeError) as exc:
        raise UsageError(f"{where}: {exc}") from None
    return replace(cfg, seed=seed) if seed is not None else cfg


def load_dataset(path) -> Dataset:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    return Dataset.load(path)


def predictor_for(spec: str, dataset: Dataset):
    """A checkpoint path or the literal ``oracle``; returns (predictor, checkpoint blob or None)."""
    rules = dataset.rules()
    if spec == "oracle":
        oracle = dataset.metadata.get("config", {}).get("oracle")
        return OraclePredictor(rules, OracleParams.from_dict(oracle) if oracle else None), None
    blob = read_json(spec)
    model = load_checkpoint(spec)
    return ModelPredictor(model, rules), blob


def grid_of(dataset: Dataset) -> tuple:
    return tuple(dataset.metadata.get("grid", DEFAULT_GRID))


def find_system(dataset: Dataset, system_id: str) -> list:
    found = [s for s in dataset.systems if s.system_id == system_id]
    if not found:
        raise DataError(f"no system with id {system_id!r} in the dataset")
    return found


def dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args) -> tuple:
    known = {f.name for f in fields(FamilyConfig)}
    d = read_config(args.config, "gen") if args.config else {}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"{args.config}: unknown keys {sorted(unknown)}")
    flags = {
        "family": args.family,
        "seeds": args.seeds,
        "elements": args.elements.split(",") if args.elements else None,
        "min_size": args.min_size,
        "max_size": args.max_size,
        "size_stride": args.size_stride,
        "reps": [int(x) for x in args.reps.split(",")] if args.reps else None,
        "molecules": args.molecules,
        "seed": args.seed,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if "family" not in d:
        raise UsageError("gen needs --family or a config with a family")
    cfg = FamilyConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    ds = generate_family(cfg)
    ds.save(args.out)
    log.info("wrote %d systems to %s", len(ds), args.out)
    return cfg.to_dict(), cfg.seed, [args.out], Path(f"{args.out}.manifest.json")


def cmd_train(args) -> tuple:
    d = read_config(args.config, "train")
    cfg = train_config(d, args.seed, args.config)
    data_path = args.data or cfg.dataset
    if not data_path:
        raise UsageError("train needs --data or a config with a dataset path")
    ds = load_dataset(data_path)
    tr, va, _ = split(ds, cfg)
    res = train(cfg, tr, va, ds.rules(), grid_of(ds))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = res.model.to_checkpoint()
    blob["training"] = {
        "config": cfg.to_dict(),
        "best_epoch": res.best_epoch,
        "epochs": res.epochs_run,
        "aux_normaliser": res.normaliser.to_dict() if res.normaliser else None,
    }
    ckpt = out / "checkpoint.json"
    ckpt.write_text(json.dumps(blob, sort_keys=True, separators=(",", ":")))
    log_path = out / "train_log.csv"
    write_csv(log_path, res.log, LOG_COLUMNS)
    log.info("best epoch %d of %d", res.best_epoch, res.epochs_run)
    return cfg.to_dict(), cfg.seed, [ckpt, log_path], out / "manifest.json", [args.config, data_path]


def _eval_split(args, ds, blob):
    if args.split == "all":
        return ds.systems
    if blob is not None and "training" in blob:
        cfg = train_config(blob["training"]["config"], args.seed, args.checkpoint)
    else:
        cfg = TrainConfig(seed=args.seed or 0)
    tr, va, te = split(ds, cfg)
    return {"train": tr, "val": va, "test": te}[args.split]


def cmd_eval(args) -> tuple:
    ds = load_dataset(args.data)
    predictor, blob = predictor_for(args.checkpoint, ds)
    systems = _eval_split(args, ds, blob)
    rec = evaluate(predictor, systems, grid_of(ds))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.json", out / "systems.csv", out / "geometries.csv"]
    dump_json(paths[0], rec.aggregate)
    write_csv(paths[1], rec.systems, ["system_id", "size", "scaling", "energy", "predicted", "ae", "re"])
    write_csv(paths[2], rec.geometries, ["system_id", "size", "lambda_pred", "lambda_true", "dsg"])
    print(json.dumps({"ae_mean": rec.aggregate["ae"]["mean"], "dsg_mean": rec.aggregate["dsg"]["mean"]}))
    inputs = [args.data] + ([args.checkpoint] if blob is not None else [])
    config = {"checkpoint": args.checkpoint, "split": args.split}
    return config, args.seed, paths, out / "manifest.json", inputs


def cmd_scan(args) -> tuple:
    ds = load_dataset(args.data)
    predictor, blob = predictor_for(args.checkpoint, ds)
    found = find_system(ds, args.system_id)
    stable = stable_geometry(found[0])
    grid = grid_of(ds)
    copies = [stable if g == 1.0 else scale_system(stable, g) for g in grid]
    pred = predictor.predict(copies)
    truth = {round(s.scaling, 9): s.energy for s in found if s.scaling is not None}
    rows = [{"scaling": float(g), "predicted": float(p), "energy": truth.get(round(g, 9))} for g, p in zip(grid, pred)]
    write_csv(args.out, rows, ["scaling", "predicted", "energy"])
    inputs = [args.data] + ([args.checkpoint] if blob is not None else [])
    config = {"checkpoint": args.checkpoint, "system_id": args.system_id}
    return config, args.seed, [args.out], Path(f"{args.out}.manifest.json"), inputs


def cmd_contrib(args) -> tuple:
    ds = load_dataset(args.data)
    predictor, blob = predictor_for(args.checkpoint, ds)
    stable = stable_geometry(find_system(ds, args.system_id)[0])
    if args.scenario == "moving-atom":
        if not 0 <= args.atom < len(stable):
            raise UsageError(f"--atom {args.atom} outside 0..{len(stable) - 1}")
        rows = moving_atom_sweep(predictor, stable, args.atom, grid_of(ds))
        write_csv(args.out, rows, ["displacement", "energy", "c_moving", "c_static_mean"])
    else:
        raw, share = atom_contributions(predictor, stable)
        rows = [{"atom": i, "element": e, "raw": float(r), "share": None if share is None else float(share[i])}
                for i, (e, r) in enumerate(zip(stable.elements, raw))]
        write_csv(args.out, rows, ["atom", "element", "raw", "share"])
    inputs = [args.data] + ([args.checkpoint] if blob is not None else [])
    config = {"checkpoint": args.checkpoint, "system_id": args.system_id, "scenario": args.scenario, "atom": args.atom}
    return config, args.seed, [args.out], Path(f"{args.out}.manifest.json"), inputs


EXPERIMENT_KEYS = {
    "size-gen": {"variants", "caps"},
    "reduced": {"variants", "schedule", "axis"},
    "ablation": {"full"},
}


def cmd_experiment(args) -> tuple:
    d = read_config(args.config, "experiment")
    unknown = set(d) - EXPERIMENT_KEYS[args.protocol]
    if unknown:
        raise UsageError(f"{args.config}: unknown keys for {args.protocol}: {sorted(unknown)}")
    ds = load_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    if args.protocol == "ablation":
        if "full" not in d:
            raise UsageError(f"{args.config}: ablation needs a 'full' training config")
        full = train_config(d["full"], seed, args.config)
        rows = ablation(ds, full, args.workers)
        paths = [out / "ablation.csv"]
        write_csv(paths[0], rows)
    else:
        if not d.get("variants"):
            raise UsageError(f"{args.config}: at least one variant is required")
        variants = {k: train_config(v, seed, f"{args.config}:{k}") for k, v in d["variants"].items()}
        if args.protocol == "size-gen":
            caps = tuple(d.get("caps", (25, None)))
            res = size_generalization(ds, variants, caps=caps, workers=args.workers)
            paths = [out / "size_table.csv", out / "pearson.csv"]
            write_csv(paths[0], res["table"], ["variant", "cap", "size", "ae_mean"])
            stats = [{"variant": n, "cap": c, **v} for (n, c), v in res["stats"].items()]
            write_csv(paths[1], stats, ["variant", "cap", "pearson", "ae", "dsg"])
        else:
            schedule = tuple(d.get("schedule", (1.0, 9 / 13, 5 / 13, 3 / 13)))
            rows = reduced_training(ds, variants, schedule, d.get("axis", "scalings"), args.workers)
            paths = [out / "reduced.csv"]
            write_csv(paths[0], rows, ["variant", "fraction", "n_train", "n_scalings", "ae_mean", "dsg_mean"])
    config = {"protocol": args.protocol, **d}
    return config, seed, paths, out / "manifest.json", [args.config, args.data]


def cmd_replay(args) -> int:
    manifest = read_json(args.manifest)
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).is_file() or sha256_file(path) != digest:
            raise DataError(f"input {path} is missing or changed since the manifest was written")
    status = main(manifest["argv"])
    if status:
        return status
    bad = [p for p, h in manifest.get("outputs", {}).items() if sha256_file(p) != h]
    if bad:
        raise DataError(f"replayed outputs differ: {bad}")
    print(json.dumps({"replayed": manifest["command"], "outputs": len(manifest.get("outputs", {}))}))
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="chemgnn", description="Relation-specialised GNN energy models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=Parser)

    def common(sp, seed_default=None):
        sp.add_argument("--seed", type=int, default=seed_default, help="master seed (overrides config files)")

    g = sub.add_parser("gen", help="generate an oracle-labelled dataset")
    g.add_argument("--family", choices=("pc", "cg", "ucg", "mol"))
    g.add_argument("--config", help="JSON config with schema chemgnn-gen/1")
    g.add_argument("--seeds", type=int, help="growth seeds per element")
    g.add_argument("--elements", help="comma-separated elements, e.g. Al,Cu")
    g.add_argument("--min-size", type=int)
    g.add_argument("--max-size", type=int)
    g.add_argument("--size-stride", type=int, help="keep every k-th growth size")
    g.add_argument("--reps", help="comma-separated fcc repetitions for pc")
    g.add_argument("--molecules", type=int, help="number of molecules for mol")
    g.add_argument("--out", required=True)
    common(g)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", required=True, help="JSON config with schema chemgnn-train/1")
    t.add_argument("--data", help="dataset JSON (defaults to the config's dataset)")
    t.add_argument("--out-dir", required=True)
    common(t)

    e = sub.add_parser("eval", help="AE/RE/DSG of a checkpoint or the oracle")
    e.add_argument("--checkpoint", required=True, help="checkpoint JSON or 'oracle'")
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--out-dir", required=True)
    common(e)

    s = sub.add_parser("scan", help="energy against isometric scaling for one system")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--system-id", required=True)
    s.add_argument("--out", required=True)
    common(s)

    c = sub.add_parser("contrib", help="per-atom energy contributions")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--system-id", required=True)
    c.add_argument("--scenario", choices=("moving-atom", "per-atom"), default="moving-atom")
    c.add_argument("--atom", type=int, default=0, help="atom moved in the moving-atom scenario")
    c.add_argument("--out", required=True)
    common(c)

    x = sub.add_parser("experiment", help="run an experiment protocol")
    x.add_argument("protocol", choices=tuple(EXPERIMENT_KEYS))
    x.add_argument("--config", required=True, help="JSON config with schema chemgnn-experiment/1")
    x.add_argument("--data", required=True)
    x.add_argument("--out-dir", required=True)
    x.add_argument("--workers", type=int, default=1)
    common(x)

    r = sub.add_parser("replay", help="re-run a manifest and check output hashes")
    r.add_argument("manifest")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "scan": cmd_scan,
            "contrib": cmd_contrib, "experiment": cmd_experiment}


def fail(kind: str, message: str, status: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return status


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        if args.command == "replay":
            return cmd_replay(args)
        if getattr(args, "workers", 1) < 1:
            raise UsageError("--workers must be at least 1")
        t0 = time.perf_counter()
        config, seed, outputs, manifest, *rest = COMMANDS[args.command](args)
        inputs = rest[0] if rest else []
        if args.command == "gen" and args.config:
            inputs = [args.config]
        write_manifest(manifest, args.command, config, seed, inputs, outputs, time.perf_counter() - t0, argv)
        return 0
    except UsageError as exc:
        return fail("usage", exc, 2)
    except ChemGnnError as exc:
        return fail(exc.kind, exc, 1)
    except (OSError, ValueError) as exc:
        return fail("runtime", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
