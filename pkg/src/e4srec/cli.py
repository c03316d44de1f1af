"""Command-line pipeline over a work directory.

Stages write their artifacts into the work directory and record themselves in
``manifest.json``; a stage whose prerequisites are missing is refused with a
message naming the stage to run first.

    synth | ingest -> pretrain-sasrec | pretrain-bpr -> extract-embeddings
    pretrain-backbone -> train | sweep -> evaluate, export-bundle -> serve
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import threading
import time
import urllib.request
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from e4srec.backbone import (
    CORPUS_SIZE, BackboneConfig, BackboneWeights, PretrainConfig, instruction_corpus, perplexity, pretrain_backbone,
)
from e4srec.bundle import export_bundle
from e4srec.data import (
    SynthConfig, build_sequences, k_core_filter, leave_one_out, load_dataset, load_interactions, save_dataset,
    synth_generate,
)
from e4srec.errors import E4SRecError, StageOrderError
from e4srec.evaluation import evaluate_full, evaluate_sampled, group_by_sparsity
from e4srec.model import E4SRecModel, TrainConfig, train
from e4srec.seqrec import (
    BPRConfig, BPRModel, ItemEmbeddingTable, PopModel, SASRecConfig, SASRecModel, extract_item_embeddings,
    train_bpr, train_sasrec,
)

log = logging.getLogger("e4srec")

STAGES = ("ingest", "synth", "pretrain-sasrec", "pretrain-bpr", "extract-embeddings", "pretrain-backbone",
          "train", "sweep", "evaluate", "export-bundle", "serve")


# configuration -------------------------------------------------------------

def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(p.read_text())
    return json.loads(p.read_text())


def _section(cls, obj: dict, name: str):
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ValueError(f"unknown key(s) in [{name}] config section: {sorted(unknown)}")
    return cls(**obj)


# work directory ------------------------------------------------------------

class Workdir:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {"stages": {}}

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def done(self, stage: str, key: str | None = None) -> bool:
        entry = self.manifest["stages"].get(stage)
        if entry is None:
            return False
        return key is None or key in entry.get("outputs", {})

    def record(self, stage: str, seconds: float, key: str = "default", **info) -> None:
        entry = self.manifest["stages"].setdefault(stage, {"outputs": {}})
        entry["outputs"][key] = {"seconds": round(seconds, 3), "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), **info}
        tmp = self.manifest_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2))
        tmp.replace(self.manifest_path)

    def require(self, stage: str, needed: str, key: str | None = None, detail: str = "") -> None:
        if needed == "data":
            if not (self.done("synth") or self.done("ingest")):
                raise StageOrderError(stage, "synth' or 'ingest", detail)
            return
        if not self.done(needed, key):
            raise StageOrderError(stage, needed, detail)

    @property
    def max_len(self) -> int:
        return int(self.manifest.get("max_len", 50))

    def split(self):
        ds = load_dataset(self.root / "dataset.json")
        return ds, leave_one_out(ds)


# stages --------------------------------------------------------------------

def cmd_synth(args, wd: Workdir, cfg: dict) -> dict:
    c = _section(SynthConfig, cfg.get("synth", {}), "synth")
    for k in ("n_users", "n_items", "sharpness", "seed"):
        v = getattr(args, k)
        if v is not None:
            c = SynthConfig(**{**asdict(c), ("transition_sharpness" if k == "sharpness" else k): v})
    records = synth_generate(c.n_users, c.n_items, c.transition_sharpness, c.seed, c.min_len, c.max_len)
    return _finish_data(args, wd, records, {"synth": asdict(c)})


def cmd_ingest(args, wd: Workdir, cfg: dict) -> dict:
    records, malformed = load_interactions(args.source, args.min_timestamp)
    return _finish_data(args, wd, records, {"source": str(args.source), "malformed_lines": malformed})


def _finish_data(args, wd: Workdir, records, info: dict) -> dict:
    ds = build_sequences(k_core_filter(records, args.k_core))
    split = leave_one_out(ds)
    save_dataset(ds, wd.path("dataset.json"))
    wd.manifest["max_len"] = args.max_len
    lengths = [len(s) for s in ds.sequences]
    return {**info, "k_core": args.k_core, "max_len": args.max_len, "users": ds.n_users, "items": ds.n_items,
            "interactions": int(sum(lengths)), "evaluated_users": len(split), "mean_length": float(np.mean(lengths))}


def cmd_pretrain_sasrec(args, wd: Workdir, cfg: dict) -> dict:
    wd.require("pretrain-sasrec", "data")
    _, split = wd.split()
    c = _section(SASRecConfig, {"max_len": wd.max_len, **cfg.get("sasrec", {})}, "sasrec")
    if args.epochs is not None:
        c.epochs = args.epochs
    model, hist = train_sasrec(split, c)
    model.save(wd.path("sasrec.ckpt"))
    return {"history": hist, "best_valid_hr10": max(h.get("valid_hr10", 0.0) for h in hist)}


def cmd_pretrain_bpr(args, wd: Workdir, cfg: dict) -> dict:
    wd.require("pretrain-bpr", "data")
    _, split = wd.split()
    c = _section(BPRConfig, cfg.get("bpr", {}), "bpr")
    if args.epochs is not None:
        c.epochs = args.epochs
    model, hist = train_bpr(split, c)
    model.save(wd.path("bpr.ckpt"))
    return {"history": hist}


def cmd_extract(args, wd: Workdir, cfg: dict) -> dict:
    src = args.embeddings
    wd.require("extract-embeddings", f"pretrain-{src}")
    model = SASRecModel.load(wd.root / "sasrec.ckpt") if src == "sasrec" else BPRModel.load(wd.root / "bpr.ckpt")
    table = extract_item_embeddings(model)
    table.save(wd.path(f"embeddings-{src}.ckpt"))
    return {"shape": list(table.matrix.shape)}


def cmd_pretrain_backbone(args, wd: Workdir, cfg: dict) -> dict:
    bc = _section(BackboneConfig, cfg.get("backbone", {}), "backbone")
    pc = _section(PretrainConfig, cfg.get("pretrain", {}), "pretrain")
    corpus_cfg = cfg.get("corpus", {})
    n = args.corpus_size or int(corpus_cfg.get("size", CORPUS_SIZE))
    corpus = instruction_corpus(n + 300, seed=int(corpus_cfg.get("seed", 0)))
    weights, hist = pretrain_backbone(corpus[:n], bc, pc)
    weights.save(wd.path("backbone.ckpt"))
    held = corpus[n:]
    init = BackboneWeights.initialize(weights.config, weights.vocab, seed=pc.seed)
    return {"history": hist, "params": weights.param_count(), "vocab": len(weights.vocab), "hash": weights.hash(),
            "heldout_perplexity": perplexity(weights, held), "init_perplexity": perplexity(init, held)}


def _train_config(args, cfg: dict, wd: Workdir) -> TrainConfig:
    c = TrainConfig.from_mapping({"max_len": wd.max_len, **cfg.get("train", {})})
    if getattr(args, "epochs", None) is not None:
        c.epochs = args.epochs
    if getattr(args, "lr", None) is not None:
        c.learning_rate = args.lr
    if getattr(args, "all_prefixes", False):
        c.all_prefixes = True
    return c


def _model_name(args) -> str:
    if args.name:
        return args.name
    name = "e4srec"
    if args.embeddings != "sasrec":
        name += f"-{args.embeddings}"
    if args.no_llm:
        name += "-nollm"
    return name


def _prepare_training(stage: str, args, wd: Workdir):
    wd.require(stage, "data")
    wd.require(stage, "extract-embeddings", key=args.embeddings,
               detail=f"run extract-embeddings --embeddings {args.embeddings}")
    backbone = None
    if not args.no_llm:
        wd.require(stage, "pretrain-backbone")
        backbone = BackboneWeights.load(wd.root / "backbone.ckpt")
        backbone.freeze()
    table = ItemEmbeddingTable.load(wd.root / f"embeddings-{args.embeddings}.ckpt")
    return backbone, table


def cmd_train(args, wd: Workdir, cfg: dict) -> dict:
    backbone, table = _prepare_training("train", args, wd)
    _, split = wd.split()
    c = _train_config(args, cfg, wd)
    before = backbone.hash() if backbone is not None else None
    model = E4SRecModel.create(backbone, table, c, no_llm=args.no_llm, d_k=_dk(wd, backbone))
    hist = train(model, split, c)
    if backbone is not None and backbone.hash() != before:
        raise E4SRecError("backbone weights changed during training")
    name = _model_name(args)
    model.save(wd.path("models", f"{name}.ckpt"), {"train_config": c.to_json(), "history": hist})
    from e4srec.plotting import plot_training

    plot_training(hist, wd.path("models", f"{name}-training.png"), title=name)
    return {"name": name, "config": c.to_json(), "history": hist, "final_valid_hr10": hist[-1].get("valid_hr10")}


def _dk(wd: Workdir, backbone) -> int:
    if backbone is not None:
        return backbone.config.dim
    if (wd.root / "backbone.ckpt").exists():
        return BackboneWeights.load(wd.root / "backbone.ckpt").config.dim
    return BackboneConfig().dim


def _parse_grid(items: list[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        if not values:
            raise ValueError(f"grid entry {item!r} must look like key=v1,v2")
        grid[key] = [json.loads(v) for v in values.split(",")]
    return grid


def cmd_sweep(args, wd: Workdir, cfg: dict) -> dict:
    backbone, table = _prepare_training("sweep", args, wd)
    _, split = wd.split()
    grid = _parse_grid(args.grid) if args.grid else cfg.get("sweep", {})
    if not grid:
        raise ValueError("sweep needs a grid: --grid learning_rate=1e-3,3e-3 --grid epochs=2,4 or a [sweep] section")
    base = _train_config(args, cfg, wd)
    keys = list(grid)
    results, best = [], None
    for values in itertools.product(*(grid[k] for k in keys)):
        c = TrainConfig.from_mapping({**base.to_json(), **dict(zip(keys, values))})
        model = E4SRecModel.create(backbone, table, c, no_llm=args.no_llm, d_k=_dk(wd, backbone))
        hist = train(model, split, c)
        hr = hist[-1]["valid_hr10"]
        results.append({"params": dict(zip(keys, values)), "valid_hr10": hr})
        log.info("sweep %s -> valid HR@10 %.4f", dict(zip(keys, values)), hr)
        if best is None or hr > best[0]:
            best = (hr, model, c, hist)
    name = _model_name(args)
    hr, model, c, hist = best
    model.save(wd.path("models", f"{name}.ckpt"), {"train_config": c.to_json(), "history": hist, "sweep": results})
    return {"name": name, "results": results, "best": {"config": c.to_json(), "valid_hr10": hr}}


def _scorer_for(name: str, wd: Workdir, split):
    if name == "pop":
        return PopModel.fit(split).scores
    if name == "sasrec":
        wd.require("evaluate", "pretrain-sasrec")
        return SASRecModel.load(wd.root / "sasrec.ckpt").scores
    if name == "bpr":
        wd.require("evaluate", "pretrain-bpr")
        return BPRModel.load(wd.root / "bpr.ckpt").scores
    path = wd.root / "models" / f"{name}.ckpt"
    if not path.exists():
        raise StageOrderError("evaluate", "train", f"no trained model named {name!r}")
    backbone = BackboneWeights.load(wd.root / "backbone.ckpt") if (wd.root / "backbone.ckpt").exists() else None
    return E4SRecModel.load(path, backbone).scores


def cmd_evaluate(args, wd: Workdir, cfg: dict) -> dict:
    wd.require("evaluate", "train")
    ds, split = wd.split()
    groups = group_by_sparsity(ds)
    names = [args.model] + [b for b in (args.compare or []) if b != args.model]
    reports = {}
    for name in names:
        scorer = _scorer_for(name, wd, split)
        if args.protocol == "full":
            reports[name] = evaluate_full(scorer, split, target=args.target, mask_history=args.mask_history,
                                          groups=groups)
        else:
            reports[name] = evaluate_sampled(scorer, split, n_neg=99, seed=args.seed, target=args.target,
                                             groups=groups)
    stem = f"{args.model}-{args.protocol}-{args.target}" + ("-masked" if args.mask_history else "")
    out = wd.path("reports", stem + ".json")
    out.write_text(json.dumps({n: json.loads(r.to_json()) for n, r in reports.items()}, indent=2))
    table = "\n\n".join(r.to_table(n) for n, r in reports.items())
    wd.path("reports", stem + ".txt").write_text(table + "\n")
    csv = ["model," + ",".join(["users"] + list(next(iter(reports.values())).metrics))]
    for n, r in reports.items():
        csv.append(f"{n},{r.n_users}," + ",".join(f"{v:.6f}" for v in r.metrics.values()))
    wd.path("reports", stem + ".csv").write_text("\n".join(csv) + "\n")
    wd.path("reports", stem + "-groups.csv").write_text(
        "".join(f"# {n}\n{r.groups_csv()}" for n, r in reports.items()))
    from e4srec.plotting import plot_reports

    plot_reports(reports, wd.path("reports", stem + ".png"), title=f"{args.protocol} protocol, {args.target} items")
    print(table)
    return {"report": str(out), "metrics": {n: r.metrics for n, r in reports.items()}}


def cmd_export(args, wd: Workdir, cfg: dict) -> dict:
    wd.require("export-bundle", "train")
    path = wd.root / "models" / f"{args.model}.ckpt"
    if not path.exists():
        raise StageOrderError("export-bundle", "train", f"no trained model named {args.model!r}")
    backbone = BackboneWeights.load(wd.root / "backbone.ckpt") if (wd.root / "backbone.ckpt").exists() else None
    model = E4SRecModel.load(path, backbone)
    out = Path(args.out) if args.out else wd.path("bundles", f"{args.model}.e4sb")
    summary = export_bundle(model, out, extra={"model": args.model})
    print(f"bundle {out}: {summary['param_count']} parameters"
          + (f" ({100 * summary['ratio_to_backbone']:.2f}% of the backbone's {summary['backbone_param_count']})"
             if "ratio_to_backbone" in summary else ""))
    return summary


def cmd_serve(args, wd: Workdir, cfg: dict) -> dict:
    from e4srec.serving import Registry, make_server

    wd.require("serve", "export-bundle")
    backbone = BackboneWeights.load(wd.root / "backbone.ckpt") if (wd.root / "backbone.ckpt").exists() else None
    bundles = dict(b.split("=", 1) for b in args.bundle) if args.bundle else {
        p.stem: str(p) for p in sorted((wd.root / "bundles").glob("*.e4sb"))}
    registry = Registry(backbone)
    for dataset_id, path in bundles.items():
        registry.load(dataset_id, path)
    server = make_server(registry, args.host, 0 if args.dry_run else args.port)
    port = server.server_address[1]
    print(f"serving {sorted(bundles)} on http://{args.host}:{port}")
    if not args.dry_run:
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return {"bundles": bundles}
    # dry run: one health check and one recommendation per bundle, then stop
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    checks = {}
    try:
        with urllib.request.urlopen(f"http://{args.host}:{port}/v1/health", timeout=30) as r:
            checks["health"] = json.loads(r.read())
        _, split = wd.split() if (wd.root / "dataset.json").exists() else (None, None)
        for dataset_id in bundles:
            hist = split.history(0, "test") if split is not None else [0]
            body = json.dumps({"dataset_id": dataset_id, "item_ids": hist, "k": 10}).encode()
            req = urllib.request.Request(f"http://{args.host}:{port}/v1/recommend", data=body, method="POST",
                                         headers={"Content-Type": "application/json"})
            with urllib.request.urlopen(req, timeout=60) as r:
                checks[dataset_id] = json.loads(r.read())
    finally:
        server.shutdown()
        server.server_close()
    print(json.dumps(checks))
    return {"bundles": bundles, "dry_run": checks}


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="e4srec", description="ID-injected LLM sequential recommendation pipeline.")
    p.add_argument("--workdir", default="e4srec-work", help="artifact directory (default: %(default)s)")
    p.add_argument("--config", help="JSON or TOML file with [synth] [sasrec] [bpr] [backbone] [pretrain] "
                                    "[corpus] [train] [sweep] sections")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(STAGES) + "}")

    def data_flags(sp):
        sp.add_argument("--k-core", type=int, default=5)
        sp.add_argument("--max-len", type=int, default=50)

    sp = sub.add_parser("ingest", help="load a user<TAB>item<TAB>timestamp file")
    sp.add_argument("source")
    sp.add_argument("--min-timestamp", type=int)
    data_flags(sp)
    sp = sub.add_parser("synth", help="generate the seeded synthetic corpus")
    for flag, typ in (("--n-users", int), ("--n-items", int), ("--sharpness", float), ("--seed", int)):
        sp.add_argument(flag, type=typ)
    data_flags(sp)
    for name in ("pretrain-sasrec", "pretrain-bpr"):
        sp = sub.add_parser(name, help=f"train the {name.split('-')[1].upper()} ID-embedding model")
        sp.add_argument("--epochs", type=int)
    sp = sub.add_parser("extract-embeddings", help="copy the item embedding table out of a pretrained model")
    sp.add_argument("--embeddings", choices=("sasrec", "bpr"), default="sasrec")
    sp = sub.add_parser("pretrain-backbone", help="next-token pretraining of the toy language model")
    sp.add_argument("--corpus-size", type=int)
    for name in ("train", "sweep"):
        sp = sub.add_parser(name, help="train the E4SRec head" if name == "train" else "grid search by valid HR@10")
        sp.add_argument("--embeddings", choices=("sasrec", "bpr"), default="sasrec")
        sp.add_argument("--no-llm", action="store_true", help="bypass the backbone (mean projected IDs)")
        sp.add_argument("--name", help="model name (default derived from the flags)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--all-prefixes", action="store_true", help="one instance per train prefix")
        if name == "sweep":
            sp.add_argument("--grid", action="append", help="key=v1,v2 (repeatable)")
    sp = sub.add_parser("evaluate", help="rank held-out items and write reports and figures")
    sp.add_argument("--model", default="e4srec")
    sp.add_argument("--compare", nargs="*", help="extra rows: pop, sasrec, bpr or other model names")
    sp.add_argument("--protocol", choices=("full", "sampled99"), default="full")
    sp.add_argument("--target", choices=("test", "valid"), default="test")
    sp.add_argument("--mask-history", action="store_true", help="exclude history items from the ranking")
    sp.add_argument("--seed", type=int, default=0, help="negative-sampling seed")
    sp = sub.add_parser("export-bundle", help="write the pluggable bundle for a trained model")
    sp.add_argument("--model", default="e4srec")
    sp.add_argument("--out")
    sp = sub.add_parser("serve", help="HTTP recommendation service")
    sp.add_argument("--bundle", action="append", help="dataset_id=path (repeatable; default: all exported)")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8080)
    sp.add_argument("--dry-run", action="store_true", help="start, self-check, stop")
    return p


COMMANDS = {
    "ingest": cmd_ingest, "synth": cmd_synth, "pretrain-sasrec": cmd_pretrain_sasrec,
    "pretrain-bpr": cmd_pretrain_bpr, "extract-embeddings": cmd_extract, "pretrain-backbone": cmd_pretrain_backbone,
    "train": cmd_train, "sweep": cmd_sweep, "evaluate": cmd_evaluate, "export-bundle": cmd_export,
    "serve": cmd_serve,
}


def _record_key(args) -> str:
    if args.command == "extract-embeddings":
        return args.embeddings
    if args.command in ("train", "sweep"):
        return _model_name(args)
    if args.command in ("evaluate", "export-bundle"):
        return args.model
    return "default"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    wd = Workdir(args.workdir)
    try:
        cfg = _read_config(args.config)
        start = time.perf_counter()
        info = COMMANDS[args.command](args, wd, cfg)
        elapsed = time.perf_counter() - start
        wd.record(args.command, elapsed, _record_key(args), **{k: v for k, v in info.items() if k != "history"})
        if args.command in ("train", "pretrain-sasrec", "pretrain-bpr", "pretrain-backbone", "sweep"):
            wd.path("logs", f"{args.command}-{_record_key(args)}.json").write_text(json.dumps(info, indent=2))
        print(f"{args.command}: done in {elapsed:.1f}s")
        return 0
    except (E4SRecError, ValueError, OSError) as exc:
        print(f"e4srec {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
