"""Command-line workbench: ingest, build-proximity, train, evaluate, ntype, grid.

Configuration is a flat ``key = value`` text file; any flag of the form
``--set key=value`` overrides the file. Every output carries a provenance
header (config digest, seed, tool version) so runs are reproducible and
artifacts from different configurations cannot be silently mixed.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .decoder import DecoderConfig
from .encoder import EncoderConfig, ProximityAdjacency
from .evaluation import evaluate, ntype_mrr_breakdown, ntype_report
from .kgdata import ContractError, DataError, augment_inverse, ingest_dataset, load_kg, save_kg
from .proximity import (accumulate_spm, build_proximity_graph, export_proximity_tsv,
                        extract_qa_pairs, load_proximity_graph, proximity_stats,
                        save_proximity_graph)
from .training import (NumericError, TrainConfig, Trainer, config_digest, grid_search,
                       params_from_checkpoint, write_trial_table)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_BOOL_KEYS = {"kg_only", "allow_off_grid", "allow_any_depth"}
_INT_KEYS = {"seed", "M", "dim", "kg_layers", "prox_layers", "batch_size", "epochs",
             "eval_every", "n_filters", "kernel"}
_FLOAT_KEYS = {"I", "learning_rate", "edge_drop_rate", "label_smoothing",
               "dropout_input", "dropout_feature", "dropout_hidden"}


def parse_config_file(path) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            values[key.strip()] = raw.strip()
    return values


def coerce(key: str, raw: str):
    try:
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key.startswith("grid."):
            return [coerce(key[5:], part) for part in raw.split(",")]
        return raw
    except ValueError:
        raise ContractError(f"config key {key!r}: cannot parse value {raw!r}") from None


def load_run_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        for key, raw in parse_config_file(args.config).items():
            cfg[key] = coerce(key, raw)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ContractError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        cfg[key.strip()] = coerce(key.strip(), raw.strip())
    return cfg


def make_configs(cfg: dict) -> tuple[EncoderConfig, DecoderConfig, TrainConfig]:
    dim = cfg.get("dim", 200)
    enc = EncoderConfig(
        dim=dim,
        kg_layers=cfg.get("kg_layers", 1),
        prox_layers=cfg.get("prox_layers", 1),
        composition=cfg.get("composition", "additive"),
        weight_scheme=cfg.get("weight_scheme", "attention"),
        kg_only=cfg.get("kg_only", False),
        allow_any_depth=cfg.get("allow_any_depth", False),
    )
    dec = DecoderConfig(
        dim=dim,
        n_filters=cfg.get("n_filters", 32),
        kernel=cfg.get("kernel", 3),
        dropout_input=cfg.get("dropout_input", 0.2),
        dropout_feature=cfg.get("dropout_feature", 0.2),
        dropout_hidden=cfg.get("dropout_hidden", 0.3),
        label_smoothing=cfg.get("label_smoothing", 0.1),
    )
    trn = TrainConfig(
        batch_size=cfg.get("batch_size", 256),
        learning_rate=cfg.get("learning_rate", 3e-4),
        optimizer=cfg.get("optimizer", "adam"),
        epochs=cfg.get("epochs", 10),
        edge_drop_rate=cfg.get("edge_drop_rate", 0.1),
        eval_every=cfg.get("eval_every", 0),
        seed=cfg.get("seed", 0),
        label_smoothing=cfg.get("label_smoothing", 0.1),
        allow_off_grid=cfg.get("allow_off_grid", False),
    )
    enc.validate()
    dec.validate()
    trn.validate()
    return enc, dec, trn


def provenance(cfg: dict, enc=None, dec=None, trn=None) -> dict:
    header = {"tool_version": __version__, "seed": cfg.get("seed", 0)}
    if enc and dec and trn:
        header["config_digest"] = config_digest(enc, dec, trn)
    return header


def _out_dir(cfg: dict) -> str:
    out = cfg.get("out_dir", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def cmd_ingest(args) -> int:
    cfg = load_run_config(args)
    for key in ("train_path", "valid_path", "test_path"):
        if key not in cfg:
            raise ContractError(f"missing required config key {key!r}")
    kg = ingest_dataset(cfg["train_path"], cfg["valid_path"], cfg["test_path"])
    out = _out_dir(cfg)
    save_kg(kg, os.path.join(out, "kg.npz"))
    report = {"provenance": provenance(cfg), **kg.report}
    _write_json(os.path.join(out, "ingest_report.json"), report)
    print(json.dumps(kg.report["counts"]))
    return EXIT_OK


def _load_kg_arg(cfg) -> "KnowledgeGraph":
    path = cfg.get("kg_path") or os.path.join(cfg.get("out_dir", "."), "kg.npz")
    if not os.path.exists(path):
        raise DataError(f"knowledge graph artifact not found: {path}")
    return load_kg(path)


def cmd_build_proximity(args) -> int:
    cfg = load_run_config(args)
    kg = _load_kg_arg(cfg)
    M = cfg.get("M", 50)
    I = cfg.get("I", 1.0)
    index = extract_qa_pairs(kg)
    spm = accumulate_spm(index, M)
    graph = build_proximity_graph(spm, I, kg.n_entities)
    out = _out_dir(cfg)
    save_proximity_graph(graph, os.path.join(out, "proximity_graph.bin"))
    export_proximity_tsv(graph, os.path.join(out, "proximity_graph.tsv"))
    stats = {"provenance": provenance(cfg), **proximity_stats(graph)}
    _write_json(os.path.join(out, "proximity_stats.json"), stats)
    if graph.n_edges == 0:
        print("warning: proximity graph is empty (threshold above the maximum "
              "accumulated value)", file=sys.stderr)
    print(json.dumps({"n_edges": graph.n_edges, "M": M, "I": I}))
    return EXIT_OK


def _load_pgraph(cfg, kg, enc):
    if enc.kg_only:
        return None, None
    path = cfg.get("pgraph_path") or os.path.join(cfg.get("out_dir", "."), "proximity_graph.bin")
    if not os.path.exists(path):
        raise DataError(f"proximity graph artifact not found: {path}")
    graph = load_proximity_graph(path)
    if "M" in cfg and graph.M != cfg["M"]:
        raise ContractError(f"proximity graph was built with M={graph.M}, run configures M={cfg['M']}")
    if "I" in cfg and graph.threshold != cfg["I"]:
        raise ContractError(
            f"proximity graph was built with I={graph.threshold}, run configures I={cfg['I']}")
    if graph.n_entities != kg.n_entities:
        raise DataError("proximity graph entity count does not match the knowledge graph")
    return graph, path


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    kg = _load_kg_arg(cfg)
    if not kg.augmented:
        kg = augment_inverse(kg)
    enc, dec, trn = make_configs(cfg)
    pgraph, _ = _load_pgraph(cfg, kg, enc)
    out = _out_dir(cfg)
    trainer = Trainer(kg, pgraph, enc, dec, trn)
    log_path = os.path.join(out, "metrics.jsonl")
    ckpt_path = os.path.join(out, "checkpoint.bin")
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"provenance": provenance(cfg, enc, dec, trn)}) + "\n")
    trainer.train(log_path=log_path, checkpoint_path=ckpt_path, quiet=args.quiet)
    print(json.dumps({"checkpoint": ckpt_path, "epochs": trainer.epoch,
                      "best_valid_mrr": trainer.best_valid_mrr}))
    return EXIT_OK


def _checkpoint_setup(cfg, kg):
    path = cfg.get("checkpoint_path") or os.path.join(cfg.get("out_dir", "."), "checkpoint.bin")
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    params, enc, dec = params_from_checkpoint(path)
    pgraph, _ = _load_pgraph(cfg, kg, enc)
    prox = None if enc.kg_only else ProximityAdjacency(pgraph)
    return params, enc, dec, prox


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args)
    kg = _load_kg_arg(cfg)
    if not kg.augmented:
        kg = augment_inverse(kg)
    params, enc, dec, prox = _checkpoint_setup(cfg, kg)
    split = cfg.get("eval_split", "test")
    metrics = evaluate(params, kg, prox, enc, dec, split=split)
    payload = {"provenance": provenance(cfg), **metrics}
    _write_json(os.path.join(_out_dir(cfg), f"metrics_{split}.json"), payload)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_ntype(args) -> int:
    cfg = load_run_config(args)
    kg = _load_kg_arg(cfg)
    if not kg.augmented:
        kg = augment_inverse(kg)
    split = cfg.get("eval_split", "test")
    report = ntype_report(kg, split)
    out = _out_dir(cfg)
    _write_json(os.path.join(out, "ntype_report.json"),
                {"provenance": provenance(cfg), **report})
    with open(os.path.join(out, "ntype_table.tsv"), "w", encoding="utf-8") as fh:
        fh.write("range\tcount\trate\n")
        for row in report["ranges"]:
            fh.write(f"{row['label']}\t{row['count']}\t{row['rate']:.2f}\n")
        fh.write(f"Total\t{report['total']}\t1.0\n")
    ckpt = cfg.get("checkpoint_path") or os.path.join(cfg.get("out_dir", "."), "checkpoint.bin")
    if os.path.exists(ckpt):
        cfg.setdefault("checkpoint_path", ckpt)
        params, enc, dec, prox = _checkpoint_setup(cfg, kg)
        breakdown = ntype_mrr_breakdown(params, kg, prox, enc, dec, split=split)
        _write_json(os.path.join(out, "ntype_mrr.json"),
                    {"provenance": provenance(cfg), **breakdown})
    print(json.dumps({r["label"]: r["count"] for r in report["ranges"]}))
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = load_run_config(args)
    kg = _load_kg_arg(cfg)
    if not kg.augmented:
        kg = augment_inverse(kg)
    enc, dec, trn = make_configs(cfg)
    grid = {key[5:]: value for key, value in cfg.items() if key.startswith("grid.")}
    if not grid:
        raise ContractError("no grid.* keys in configuration")
    result = grid_search(kg, grid, enc, dec, trn, budget=cfg.get("budget"))
    out = _out_dir(cfg)
    write_trial_table(result, os.path.join(out, "trials.tsv"))
    print(json.dumps({"n_trials": len(result["trials"]), "complete": result["complete"]}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="proxkg",
        description="Knowledge graph embedding with a derived proximity graph")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "ingest": (cmd_ingest, "Read triple files, intern vocabularies, write kg.npz"),
        "build-proximity": (cmd_build_proximity,
                            "Accumulate shared-query proximity and write the graph"),
        "train": (cmd_train, "Train the encoder-decoder model"),
        "evaluate": (cmd_evaluate, "Filtered ranking metrics for a checkpoint"),
        "ntype": (cmd_ntype, "Answer-count complexity table (and per-range MRR)"),
        "grid": (cmd_grid, "Hyper-parameter grid search ranked by validation MRR"),
    }
    for name, (fn, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single configuration key (repeatable)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ContractError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
