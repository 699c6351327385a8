"""Command-line entry point: gen-data, train, eval, gradcheck, inspect.

Config precedence for ``train``: built-in defaults < ``--config`` JSON file <
``SGS_SEED`` (seed only) < explicit flags. Every command that writes files
also writes ``manifest.json`` next to them with the resolved config and
content hashes.

Failures print a single line ``error: CODE: message`` to stderr and exit 2
(1 for a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, file_sha256
from .data.catalog import CATEGORIES, CatalogError, PredicateCatalog, load_catalog, save_catalog
from .data.embeddings import EmbeddingProvider
from .data.scenes import SceneSchemaError, load_scenes_json, save_scenes_json
from .data.synthetic import SyntheticConfig, generate_synthetic
from .model import PROTOCOLS, ConfigError, ModelConfig, load_model, parameter_count
from .tensor import NonFiniteError
from .train import WEIGHTED_CE_MODES, TrainConfig, TrainingError, label_table, loss_spec_for, train

SHUFFLE_FLAGS = {"full": "full", "pair": "pair_to_pair", "pair_to_pair": "pair_to_pair", "none": "none"}
TEST_SEED_OFFSET = 1_000_003

# Experiment presets: (row name, flag overrides). Rows run sequentially.
PRESETS = {
    "table3": [(f"shuffle_layers_{n}", {"shuffle_layers": n}) for n in (4, 5, 6, 7)],
    "table4": [
        ("no_shuffle", {"shuffle": "none"}),
        ("pair_to_pair_shuffle", {"shuffle": "pair"}),
        ("full_shuffle", {"shuffle": "full"}),
    ],
    "table5": [
        ("shuffle_only", {"shuffle": "full", "weighted_ce": "off"}),
        ("weighted_ce_only", {"shuffle": "none", "weighted_ce": "on"}),
        ("shuffle_and_weighted_ce", {"shuffle": "full", "weighted_ce": "on"}),
    ],
}

# flag dest -> (section, field); sections: model, train, loss, run
TRAIN_KEYS = {
    "d_model": ("model", "d_model"),
    "encoder_layers": ("model", "n_encoder_layers"),
    "heads": ("model", "n_heads"),
    "shuffle_layers": ("model", "n_shuffle_layers"),
    "shuffle": ("model", "shuffle_mode"),
    "ffn_hidden": ("model", "ffn_hidden"),
    "d_e": ("model", "d_e"),
    "lr": ("train", "learning_rate"),
    "warmup_steps": ("train", "warmup_steps"),
    "decay_factor": ("train", "decay_factor"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "seed": ("train", "seed"),
    "pair_cap": ("train", "pair_cap"),
    "protocol": ("train", "protocol"),
    "eval_every": ("train", "eval_every"),
    "weighted_ce": ("loss", "weighted_ce"),
    "category_loss_scale": ("loss", "category_loss_scale"),
    "negative_ratio": ("loss", "negative_ratio"),
}
TRAIN_DEFAULTS = {
    "d_model": 64,
    "encoder_layers": 2,
    "heads": 4,
    "shuffle_layers": 2,
    "shuffle": "full",
    "ffn_hidden": 0,
    "d_e": 50,
    "lr": 1e-3,
    "warmup_steps": 500,
    "decay_factor": 0.1,
    "epochs": 10,
    "batch_size": 4,
    "seed": 0,
    "pair_cap": 64,
    "protocol": "predcls",
    "eval_every": 1,
    "weighted_ce": "late",
    "category_loss_scale": 1.0,
    "negative_ratio": 3.0,
}


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 2):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------

def _sha(path: Path) -> str:
    return file_sha256(path)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out_dir: Path, command: str, config: dict, seed, inputs: dict, outputs: list[Path]) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": _sha(Path(p))} for name, p in inputs.items()},
        "outputs": {p.name: _sha(p) for p in outputs},
    }
    path = out_dir / "manifest.json"
    _write_json(path, manifest)
    return path


def _env_seed() -> int | None:
    raw = os.environ.get("SGS_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise CliError("CONFIG", f"SGS_SEED must be an integer, got {raw!r}") from None


def _load_json_config(path) -> dict:
    if path is None:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CliError("IO", f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError("CONFIG", f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise CliError("CONFIG", f"{path}: config must be a JSON object")
    unknown = sorted(set(obj) - set(TRAIN_KEYS))
    if unknown:
        raise CliError("CONFIG", f"{path}: unknown config keys {unknown}")
    return obj


def _resolve_catalog(data_dir: Path | None, catalog_path) -> tuple[PredicateCatalog, Path | None]:
    path = Path(catalog_path) if catalog_path else (data_dir / "catalog.json" if data_dir else None)
    if path is not None and not path.exists():
        if catalog_path:
            raise CliError("IO", f"catalog not found: {path}")
        path = None
    return load_catalog(path), path


def _scenes_path(args, split: str) -> Path:
    explicit = getattr(args, split, None)
    if explicit:
        return Path(explicit)
    if args.data is None:
        raise CliError("CONFIG", f"need --data DIR or --{split} FILE")
    return Path(args.data) / f"{split}.json"


# ----------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = dict(
        n_objects_range=(args.min_objects, args.max_objects),
        zipf_exponent=args.zipf,
        d_v=args.d_v,
        n_object_classes=args.object_classes,
        world_seed=args.world_seed,
    )
    try:
        train_cfg = SyntheticConfig(n_scenes=args.scenes, seed=seed, **base)
        train_ds, catalog = generate_synthetic(train_cfg)
        outputs = [out / "train.json"]
        save_scenes_json(train_ds, outputs[0], catalog)
        if args.test_scenes:
            test_cfg = SyntheticConfig(n_scenes=args.test_scenes, seed=seed + TEST_SEED_OFFSET, **base)
            test_ds, _ = generate_synthetic(test_cfg, catalog)
            outputs.append(out / "test.json")
            save_scenes_json(test_ds, outputs[-1], catalog)
    except ValueError as exc:
        raise CliError("CONFIG", str(exc)) from None
    save_catalog(catalog, out / "catalog.json")
    freq = {label: count for label, count in zip(catalog.labels, catalog.frequencies())}
    _write_json(out / "frequencies.json", freq)
    outputs += [out / "catalog.json", out / "frequencies.json"]
    config = {"train_scenes": args.scenes, "test_scenes": args.test_scenes, **base}
    config["n_objects_range"] = list(config["n_objects_range"])
    write_manifest(out, "gen-data", config, seed, {}, outputs)
    counts = catalog.frequencies()
    print(f"wrote {args.scenes} train / {args.test_scenes} test scenes to {out}")
    if sum(counts):
        print(f"triplets {sum(counts)}; most frequent {max(counts)}; least frequent {min(counts)}")
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------

def resolve_train_settings(args) -> dict:
    settings = dict(TRAIN_DEFAULTS)
    settings.update(_load_json_config(args.config))
    env_seed = _env_seed()
    if env_seed is not None:
        settings["seed"] = env_seed
    for key in TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["shuffle"] not in SHUFFLE_FLAGS:
        raise CliError("CONFIG", f"unknown shuffle mode {settings['shuffle']!r}")
    settings["shuffle"] = SHUFFLE_FLAGS[settings["shuffle"]]
    if settings["weighted_ce"] not in WEIGHTED_CE_MODES:
        raise CliError("CONFIG", f"weighted_ce must be one of {WEIGHTED_CE_MODES}")
    return settings


def build_configs(settings: dict, catalog: PredicateCatalog, dataset) -> tuple[ModelConfig, TrainConfig, dict]:
    model_kw = {f: settings[k] for k, (sec, f) in TRAIN_KEYS.items() if sec == "model"}
    train_kw = {f: settings[k] for k, (sec, f) in TRAIN_KEYS.items() if sec == "train"}
    loss_kw = {f: settings[k] for k, (sec, f) in TRAIN_KEYS.items() if sec == "loss"}
    try:
        model = ModelConfig.for_catalog(
            catalog, n_object_classes=len(dataset.object_classes), d_v=dataset.visual_dim, seed=settings["seed"], **model_kw
        )
        tc = TrainConfig(**train_kw)
        tc.validate()
    except (ConfigError, ValueError, TypeError) as exc:
        raise CliError("CONFIG", str(exc)) from None
    return model, tc, loss_kw


def _train_one(settings: dict, args, out: Path, command: str) -> dict:
    data_dir = Path(args.data) if args.data else None
    catalog, catalog_path = _resolve_catalog(data_dir, args.catalog)
    train_path = _scenes_path(args, "train")
    dataset = _load_scenes(train_path, catalog)
    val_path = Path(args.val) if args.val else (data_dir / "test.json" if data_dir and (data_dir / "test.json").exists() else None)
    val = _load_scenes(val_path, catalog) if val_path else None
    model_cfg, train_cfg, loss_kw = build_configs(settings, catalog, dataset)
    try:
        spec = loss_spec_for(
            loss_kw["weighted_ce"], catalog, train_cfg.epochs,
            category_loss_scale=loss_kw["category_loss_scale"], negative_ratio=loss_kw["negative_ratio"],
        )  # fmt: skip
    except ValueError as exc:
        raise CliError("CONFIG", str(exc)) from None
    provider = None
    if args.embeddings:
        try:
            provider = EmbeddingProvider.from_file(args.embeddings, dim=model_cfg.d_e, seed=model_cfg.seed)
        except (OSError, ValueError) as exc:
            raise CliError("IO", f"cannot read embeddings {args.embeddings}: {exc}") from None
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log_path = out / "model.sgsp", out / "train_log.jsonl"
    try:
        result = train(
            dataset, model_cfg, train_cfg, spec, catalog,
            label_embeddings=label_table(dataset, model_cfg, provider),
            val_scenes=list(val) if val is not None else None,
            log_path=log_path, checkpoint_path=ckpt,
        )  # fmt: skip
    except (TrainingError, NonFiniteError) as exc:
        raise CliError("TRAINING", str(exc)) from None
    inputs = {"train": train_path}
    if val_path:
        inputs["val"] = val_path
    if catalog_path:
        inputs["catalog"] = catalog_path
    if args.embeddings:
        inputs["embeddings"] = Path(args.embeddings)
    snapshot = dict(settings, resolved_model=model_cfg.to_dict(), resolved_train=train_cfg.to_dict())
    write_manifest(out, command, snapshot, settings["seed"], inputs, [ckpt, log_path])
    last = result.log[-1] if result.log else {}
    print(f"{out}: {parameter_count(model_cfg)} params, {train_cfg.epochs} epochs, final loss {last.get('total_loss', float('nan')):.4f}")
    print(f"checkpoint sha256 {result.checkpoint_sha256}")
    return {"checkpoint": ckpt, "val": val, "catalog": catalog, "val_path": val_path}


def cmd_train(args) -> int:
    presets = [name for name in PRESETS if getattr(args, f"paper_{name}")]
    if len(presets) > 1:
        raise CliError("CONFIG", "choose at most one --paper-table* preset")
    base = resolve_train_settings(args)
    if not presets:
        _train_one(base, args, Path(args.out), "train")
        return 0
    from .evaluation import evaluate_model

    preset = presets[0]
    out = Path(args.out)
    table: dict[str, dict[str, dict]] = {}
    for row, overrides in PRESETS[preset]:
        settings = dict(base)
        for k, v in overrides.items():
            settings[k] = SHUFFLE_FLAGS[v] if k == "shuffle" else v
        print(f"== {preset}: {row}")
        info = _train_one(settings, args, out / row, f"train --paper-{preset} [{row}]")
        if info["val"] is None:
            continue
        params = load_model(info["checkpoint"])
        table[row] = {
            proto: evaluate_model(params, list(info["val"]), info["catalog"], proto, args.k)
            for proto in PROTOCOLS
            if proto != "sgdet" or all(s.detected_objects is not None for s in info["val"])
        }
    if table:
        report = {
            row: {p: {str(k): r.to_json() for k, r in reps.items()} for p, reps in protos.items()}
            for row, protos in table.items()
        }
        _write_json(out / f"{preset}_report.json", report)
        text = _preset_table(table, args.k)
        (out / f"{preset}_report.txt").write_text(text + "\n")
        print(text)
    return 0


def _preset_table(table: dict, ks) -> str:
    protos = [p for p in PROTOCOLS if any(p in v for v in table.values())]
    head = f"{'row':<26}" + "".join(f" | {p + ' mR@' + str(k):>14}" for p in protos for k in ks)
    lines = [head, "-" * len(head)]
    for row, reps in table.items():
        cells = "".join(
            f" | {100 * reps[p][k].mean_recall:13.2f}%" if p in reps else f" | {'-':>14}" for p in protos for k in ks
        )
        lines.append(f"{row:<26}{cells}")
    return "\n".join(lines)


# ----------------------------------------------------------------------
# eval
# ----------------------------------------------------------------------

def _load_scenes(path: Path, catalog: PredicateCatalog):
    try:
        return load_scenes_json(path, catalog)
    except FileNotFoundError:
        raise CliError("IO", f"scene file not found: {path}") from None
    except SceneSchemaError as exc:
        raise CliError("DATA", str(exc)) from None


def cmd_eval(args) -> int:
    from .evaluation import evaluate, load_predictions, predict, render_breakdown, render_table, save_predictions

    if bool(args.checkpoint) == bool(args.from_predictions):
        raise CliError("CONFIG", "give exactly one of --checkpoint or --from-predictions")
    data_path = Path(args.scenes)
    catalog, _ = _resolve_catalog(data_path.parent, args.catalog)
    dataset = _load_scenes(data_path, catalog)
    scenes = list(dataset)
    protocols = list(PROTOCOLS) if args.protocol == "all" else [args.protocol]
    if "sgdet" in protocols and any(s.detected_objects is None for s in scenes):
        if args.protocol == "all":
            protocols.remove("sgdet")
        else:
            raise CliError("PROTOCOL", "SGDet needs detected_objects in every scene")
    params = None
    if args.checkpoint:
        try:
            params = load_model(args.checkpoint)
        except (CheckpointError, OSError) as exc:
            raise CliError("CHECKPOINT", str(exc)) from None
        if params.object_classes and list(params.object_classes) != list(dataset.object_classes):
            raise CliError("DATA", "object classes of the scene file differ from the checkpoint")
    reports = {}
    for proto in protocols:
        if params is not None:
            preds = predict(params, scenes, proto, graph_constraint=not args.no_graph_constraint, threads=args.threads)
            if args.save_predictions:
                save_predictions(preds, catalog, args.save_predictions)
        else:
            try:
                preds = load_predictions(args.from_predictions, scenes, catalog, proto)
            except (OSError, ValueError, CatalogError) as exc:
                raise CliError("DATA", str(exc)) from None
        try:
            reports[proto] = evaluate(preds, scenes, catalog, args.k, proto)
        except ValueError as exc:
            raise CliError("DATA", str(exc)) from None
    payload = {p: {str(k): r.to_json() for k, r in reps.items()} for p, reps in reports.items()}
    if args.out:
        _write_json(Path(args.out), payload)
    if args.table or args.breakdown:
        if args.table:
            print(render_table(reports))
        if args.breakdown:
            for reps in reports.values():
                print(render_breakdown(reps[max(reps)]))
    else:
        print(json.dumps({p: {k: {"R": v["recall"], "mR": v["mean_recall"]} for k, v in r.items()} for p, r in payload.items()}))
    return 0


# ----------------------------------------------------------------------
# gradcheck / inspect
# ----------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    from .checks import E2E_MODES, OPS, format_rows, run_all

    if args.op:
        unknown = [o for o in args.op if o not in OPS]
        if unknown:
            raise CliError("CONFIG", f"unknown op(s) {unknown}; choose from {', '.join(OPS)}")
    modes = E2E_MODES if args.mode == "all" else (SHUFFLE_FLAGS[args.mode],)
    if args.op and args.mode == "all" and not args.end_to_end:
        modes = ()
    ops = args.op if args.op else (None if not args.end_to_end_only else [])
    rows = run_all(ops, modes, max_entries=args.max_entries, tol=args.tol)
    print(format_rows(rows))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        raise CliError("GRADCHECK", f"{len(failed)} check(s) above tolerance: {', '.join(failed)}", exit_code=1)
    return 0


def cmd_inspect(args) -> int:
    catalog, _ = _resolve_catalog(None, args.catalog)
    if args.checkpoint:
        try:
            params = load_model(args.checkpoint)
        except (CheckpointError, OSError) as exc:
            raise CliError("CHECKPOINT", str(exc)) from None
        from .model import describe

        print(describe(params))
        return 0
    print(f"predicates: {len(catalog)}")
    for cat in CATEGORIES:
        labels = [catalog.labels[i] for i in catalog.members(cat)]
        print(f"  {cat} ({len(labels)}): {', '.join(labels)}")
    if any(catalog.frequencies()):
        print(f"training frequencies: {dict(zip(catalog.labels, catalog.frequencies()))}")
    settings = resolve_train_settings(args)
    model_kw = {f: settings[k] for k, (sec, f) in TRAIN_KEYS.items() if sec == "model"}
    try:
        cfg = ModelConfig.for_catalog(catalog, seed=settings["seed"], **model_kw)
    except ConfigError as exc:
        raise CliError("CONFIG", str(exc)) from None
    print(f"model config: {json.dumps(cfg.to_dict(), sort_keys=True)}")
    print(f"parameters: {parameter_count(cfg)}")
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of settings (keys as flag names with underscores)")
    p.add_argument("--d-model", type=int)
    p.add_argument("--encoder-layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--shuffle", choices=sorted(SHUFFLE_FLAGS))
    p.add_argument("--shuffle-layers", type=_positive_int)
    p.add_argument("--ffn-hidden", type=int)
    p.add_argument("--d-e", type=int)
    p.add_argument("--seed", type=int)


class _Parser(argparse.ArgumentParser):
    """Usage errors follow the same one-line ``error: CODE: message`` contract."""

    def error(self, message):
        self.exit(2, f"error: USAGE: {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgshuffle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a seeded synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, default=100)
    g.add_argument("--test-scenes", type=int, default=0)
    g.add_argument("--seed", type=int)
    g.add_argument("--zipf", type=float, default=1.0)
    g.add_argument("--d-v", type=int, default=64)
    g.add_argument("--min-objects", type=int, default=4)
    g.add_argument("--max-objects", type=int, default=8)
    g.add_argument("--object-classes", type=int, default=30)
    g.add_argument("--world-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model (or a preset grid)")
    t.add_argument("--data", help="directory holding train.json / test.json / catalog.json")
    t.add_argument("--train", help="training scene file (overrides --data)")
    t.add_argument("--val", help="validation scene file")
    t.add_argument("--catalog")
    t.add_argument("--embeddings", help="GloVe-style text file for object label vectors")
    t.add_argument("--out", required=True)
    _add_model_flags(t)
    t.add_argument("--weighted-ce", choices=WEIGHTED_CE_MODES)
    t.add_argument("--category-loss-scale", type=float)
    t.add_argument("--negative-ratio", type=float)
    t.add_argument("--lr", type=float)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--decay-factor", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--pair-cap", type=int)
    t.add_argument("--protocol", choices=("predcls", "sgcls"))
    t.add_argument("--eval-every", type=int)
    t.add_argument("--k", type=_positive_int, nargs="+", default=[50, 100], help="K values for preset reports")
    for name in PRESETS:
        t.add_argument(f"--paper-{name}", action="store_true", help=f"run the {name} grid")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="(mean) Recall@K of a checkpoint or a prediction file")
    e.add_argument("--scenes", required=True, help="scene file to evaluate on")
    e.add_argument("--catalog")
    e.add_argument("--checkpoint")
    e.add_argument("--from-predictions")
    e.add_argument("--save-predictions")
    e.add_argument("--protocol", choices=PROTOCOLS + ("all",), default="predcls")
    e.add_argument("--k", type=_positive_int, nargs="+", default=[20, 50, 100])
    e.add_argument("--breakdown", action="store_true", help="per-category mean recall at the largest K")
    e.add_argument("--table", action="store_true")
    e.add_argument("--no-graph-constraint", action="store_true")
    e.add_argument("--threads", type=_positive_int, default=1)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every op and the full loss")
    c.add_argument("--op", nargs="+", help="only these ops")
    c.add_argument("--mode", choices=("all",) + tuple(sorted(SHUFFLE_FLAGS)), default="all")
    c.add_argument("--end-to-end", action="store_true", help="with --op, also run the end-to-end checks")
    c.add_argument("--end-to-end-only", action="store_true")
    c.add_argument("--max-entries", type=_positive_int, default=4, help="probed entries per parameter (end-to-end)")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="print catalog, config and parameter counts")
    i.add_argument("--catalog")
    i.add_argument("--checkpoint")
    _add_model_flags(i)
    i.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (CatalogError, ConfigError) as exc:
        print(f"error: CONFIG: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: IO: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
