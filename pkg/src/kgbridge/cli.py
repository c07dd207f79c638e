"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical abort.
Commands that write to an output directory leave a ``run_manifest.json``
there with input/output hashes, the config hash, the seed and wall time.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .autodiff import NumericalError
from .kg import DataError

log = logging.getLogger("kgbridge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BridgeSection(_Strict):
    d: int = 128
    layers: int = 6
    heads: int = 4
    variant: str = "residual-additive"
    projection_kind: str = "linear"
    ff_mult: int = 4
    seed: int = 0


class TrainSection(_Strict):
    batch_size: int = 256
    epochs: int = 50
    lr: float = 1e-4
    tau: float = 0.07
    M: int = 31
    seed: int = 0
    negative_mode: str = "sampled"
    learnable_tau: bool = False
    validate_each_epoch: bool = Field(True, alias="validate")


class EvalSection(_Strict):
    ks: list[int] = [1, 3, 10]
    filtered: bool = True
    k_retrieval: int = 10


class RunConfig(_Strict):
    nodes: Path
    triples: Path
    split_dir: Path
    cache: Path
    output_dir: Path
    encoders: list[dict[str, Any]] | None = None  # when given, the cache fingerprint is checked
    bridge: BridgeSection = BridgeSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    seed: int | None = None  # overrides both bridge.seed and train.seed

    def resolve(self, base: Path) -> "RunConfig":
        upd = {k: (base / getattr(self, k)) for k in ("nodes", "triples", "split_dir", "cache", "output_dir")}
        return self.model_copy(update=upd)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise UsageError(f"{path}: {exc}") from None
    cfg = cfg.resolve(path.parent)
    for name in ("nodes", "triples", "cache"):
        if not getattr(cfg, name).is_file():
            raise DataError(f"config {name}: {getattr(cfg, name)} does not exist")
    if not cfg.split_dir.is_dir():
        raise DataError(f"config split_dir: {cfg.split_dir} is not a directory")
    return cfg


# ---------------------------------------------------------------------------
# manifest


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_paths(paths: Sequence[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        if p.is_dir():
            for f in sorted(p.iterdir()):
                if f.is_file() and f.name != "run_manifest.json":
                    out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


def write_manifest(
    out_dir: Path,
    command: str,
    config: dict,
    inputs: Sequence[Path],
    outputs: Sequence[Path],
    seed: int | None,
    started: float,
) -> Path:
    cfg_blob = json.dumps(config, sort_keys=True, default=str).encode()
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(cfg_blob).hexdigest(),
        "inputs": _hash_paths(inputs),
        "outputs": _hash_paths(outputs),
        "seed": seed,
        "wall_seconds": round(time.perf_counter() - started, 3),
    }
    path = Path(out_dir) / "run_manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")
    return path


def _args_config(args: argparse.Namespace) -> dict:
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k not in ("func",)}


# ---------------------------------------------------------------------------
# commands


def _graph(args):
    from .kg import load_graph

    return load_graph(args.nodes, args.triples)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--ratios expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--ratios expects three numbers, got {len(parts)}")
    return parts


def cmd_split(args) -> int:
    from .kg import split_triples, write_split

    t0 = time.perf_counter()
    kg = _graph(args)
    try:
        split = split_triples(kg, _parse_ratios(args.ratios), args.seed)
    except ValueError as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = write_split(split, out)
    for w in split.warnings:
        log.warning("%s", w)
    write_manifest(out, "split", _args_config(args), [args.nodes, args.triples], list(files.values()), args.seed, t0)
    print(json.dumps({"train": len(split.train), "valid": len(split.valid), "test": len(split.test)}, sort_keys=True))
    return EXIT_OK


def _encoder_specs(path: Path):
    from .encoders import EncoderSpec

    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"encoder spec file {path} not found") from None
    items = raw["encoders"] if isinstance(raw, dict) else raw
    try:
        return [EncoderSpec.from_dict(d) for d in items]
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_encode(args) -> int:
    from .encoders import encode_all, persist_cache

    t0 = time.perf_counter()
    kg = _graph(args)
    specs = _encoder_specs(args.spec)
    cache = encode_all(kg, specs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    persist_cache(cache, out)
    write_manifest(out.parent, "encode", _args_config(args), [args.nodes, args.triples, args.spec], [out], None, t0)
    print(json.dumps({"cache": str(out), "fingerprint": cache.fingerprint.hex(),
                      "rows": {m: len(ids) for m, ids in cache.ids.items()}}, sort_keys=True))
    return EXIT_OK


def cmd_train_bridge(args) -> int:
    from .bridge import BridgeConfig
    from .encoders import EncoderSpec, load_cache
    from .kg import load_graph, load_split
    from .trainer import TrainConfig, save_checkpoint, train_bridge

    t0 = time.perf_counter()
    cfg = load_run_config(args.config)
    kg = load_graph(cfg.nodes, cfg.triples)
    split = load_split(cfg.split_dir, kg)
    specs = [EncoderSpec.from_dict(d) for d in cfg.encoders] if cfg.encoders else None
    cache = load_cache(cfg.cache, specs, strict=not args.allow_fingerprint_mismatch)
    bridge = cfg.bridge.model_dump()
    train = cfg.train.model_dump(by_alias=True)
    if cfg.seed is not None:
        bridge["seed"] = train["seed"] = cfg.seed
    try:
        bcfg, tcfg = BridgeConfig(**bridge), TrainConfig(**train)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    result = train_bridge(kg, split, cache, tcfg, bcfg, log_path=out / "train_log.jsonl")
    save_checkpoint(result.final, out / "final.bbr")
    save_checkpoint(result.best, out / "best.bbr")
    for w in result.warnings:
        log.warning("%s", w)
    write_manifest(
        out, "train-bridge", cfg.model_dump(mode="json", by_alias=True),
        [Path(args.config), cfg.nodes, cfg.triples, cfg.split_dir, cfg.cache],
        [out / "final.bbr", out / "best.bbr", out / "train_log.jsonl"], tcfg.seed, t0,
    )
    print(json.dumps({"final": result.final.content_hash, "best_epoch": result.best.epoch,
                      "final_loss": result.history[-1]["mean_loss"] if result.history else None}, sort_keys=True))
    return EXIT_OK


def cmd_train_kge(args) -> int:
    from .kg import load_split
    from .kge import KgeTrainConfig, save_kge, train_kge

    t0 = time.perf_counter()
    kg = _graph(args)
    split = load_split(args.split, kg)
    try:
        cfg = KgeTrainConfig(
            family=args.family, d_e=args.dim, d_r=args.rel_dim or args.dim, lr=args.lr, epochs=args.epochs,
            negatives=args.negatives, loss_kind=args.loss, margin=args.margin, batch_size=args.batch_size,
            same_modality=args.same_modality, seed=args.seed,
        )
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    model = train_kge(kg, split, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_kge(model, out)
    write_manifest(out.parent, "train-kge", _args_config(args), [args.nodes, args.triples, args.split], [out], args.seed, t0)
    print(json.dumps({"checkpoint": str(out), "sha256": digest, "family": model.family}, sort_keys=True))
    return EXIT_OK


def _load_any_model(path: Path):
    """(model, header) for either a bridge or a KGE checkpoint."""
    from . import checkpoint as ckpt_io
    from .kge import kge_from_blob
    from .trainer import checkpoint_from_blob

    header, tensors, digest = ckpt_io.read(path)
    if header.get("kind") == "kge":
        return kge_from_blob(header, tensors, digest), None
    ck = checkpoint_from_blob(header, tensors, digest)
    return ck.model(), ck


def _parse_task(text: str) -> tuple[str, str, str]:
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"--task expects HEAD_MODALITY:RELATION:TAIL_MODALITY, got {text!r}")
    hm, rel, tm = parts
    return (rel, hm, tm)


def cmd_eval(args) -> int:
    from .encoders import load_cache
    from .evaluation import evaluate_link_prediction, known_from_split
    from .kg import load_split

    t0 = time.perf_counter()
    kg = _graph(args)
    split = load_split(args.split, kg)
    model, ck = _load_any_model(args.checkpoint)
    cache = None
    if ck is not None:
        if not args.cache:
            raise UsageError("bridge checkpoints need --cache")
        cache = load_cache(args.cache)
        ck.check_fingerprint(cache, strict=not args.allow_fingerprint_mismatch)
    triples = {"test": split.test, "valid": split.valid, "train": split.train}[args.on]
    tasks = [_parse_task(t) for t in args.task] if args.task else None
    report = evaluate_link_prediction(
        model, triples, kg, cache, ks=tuple(args.ks), filtered=not args.raw, k_retrieval=args.k_retrieval,
        known=known_from_split(kg, split), tasks=tasks,
    )
    text = report.to_json()
    outputs = []
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        outputs.append(out)
        if args.ranks:
            report.write_ranks_tsv(args.ranks)
            outputs.append(Path(args.ranks))
        write_manifest(out.parent, "eval", _args_config(args),
                       [p for p in (args.nodes, args.triples, args.split, args.checkpoint, args.cache) if p],
                       outputs, None, t0)
    elif args.ranks:
        report.write_ranks_tsv(args.ranks)
    print(text)
    return EXIT_OK


def _bridge_inputs(args):
    from .encoders import load_cache
    from .trainer import load_checkpoint

    kg = _graph(args)
    ck = load_checkpoint(args.checkpoint)
    cache = load_cache(args.cache)
    ck.check_fingerprint(cache, strict=not args.allow_fingerprint_mismatch)
    return kg, ck.model(), cache


def cmd_retrieve(args) -> int:
    import numpy as np

    from .autodiff import no_record
    from .retrieval import build_index, top_k

    kg, model, cache = _bridge_inputs(args)
    if args.node not in kg.nodes:
        raise DataError(f"unknown node {args.node!r}")
    if args.tail_modality not in kg.modality_vocab:
        raise DataError(f"unknown modality {args.tail_modality!r}")
    head_mod, raw = cache.rows([args.node])
    with no_record():
        q = model.transform(model.project(raw, head_mod), head_mod, args.tail_modality, args.relation).data[0]
        index = build_index(kg.nodes_of(args.tail_modality), cache, model)
    res = top_k(index, np.asarray(q, dtype=np.float64), args.k,
                meta={"node": args.node, "relation": args.relation, "tail_modality": args.tail_modality})
    print(json.dumps(res.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def _parse_role(text: str):
    from .prompts import RetrievalRole

    parts = text.split(":")
    if len(parts) != 4:
        raise UsageError(f"--role expects NAME:TAIL_MODALITY:RELATION:K, got {text!r}")
    try:
        return RetrievalRole(parts[0], parts[1], parts[2], int(parts[3]))
    except ValueError:
        raise UsageError(f"--role K must be an integer in {text!r}") from None


def cmd_prompt(args) -> int:
    from .prompts import PromptBundle, assemble_prompt, retrieve_for_rag

    fields = {k: v for k, v in (("input_question", args.question), ("text_guidance", args.guidance),
                                ("smiles", args.smiles), ("sequence", args.sequence)) if v is not None}
    if args.bundle:
        try:
            raw = json.loads(Path(args.bundle).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"bundle file {args.bundle} not found") from None
        bundle = PromptBundle(args.template, raw.get("lists", {}), {**raw.get("fields", {}), **fields})
    else:
        missing = [f for f in ("checkpoint", "cache", "nodes", "triples", "node") if not getattr(args, f)]
        if missing or not args.role:
            raise UsageError("prompt needs --bundle, or --checkpoint/--cache/--nodes/--triples/--node and --role")
        kg, model, cache = _bridge_inputs(args)
        roles = [_parse_role(r) for r in args.role]
        bundle, _ = retrieve_for_rag(args.template, args.node, roles, model, cache, kg, fields)
    try:
        text = assemble_prompt(bundle)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_planted_bench(args) -> int:
    from .planted import PRESETS, build_planted, run_planted

    t0 = time.perf_counter()
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    preset = PRESETS[args.preset]
    data = build_planted(preset)
    outcomes = [run_planted(preset, v, data) for v in args.variant]
    summary = {
        "preset": args.preset,
        "random_mrr": outcomes[0].random_mrr,
        "variants": {o.variant: o.to_dict() for o in outcomes},
    }
    text = json.dumps(summary, sort_keys=True, indent=2)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "planted_report.json").write_text(text + "\n", encoding="utf-8")
        write_manifest(out, "planted-bench", _args_config(args), [], [out / "planted_report.json"],
                       preset.train.seed, t0)
    print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_graph(p, required=True):
    p.add_argument("--nodes", type=Path, required=required, help="nodes TSV")
    p.add_argument("--triples", type=Path, required=required, help="triples TSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kgbridge", description="Multimodal knowledge-graph bridge toolkit")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", help="stratified train/valid/test split")
    _add_graph(p)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("encode", help="encode every node into an embedding cache")
    _add_graph(p)
    p.add_argument("--spec", type=Path, required=True, help="JSON list of encoder specs")
    p.add_argument("--out", type=Path, required=True, help="cache file")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train-bridge", help="contrastive training of the bridge")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.set_defaults(func=cmd_train_bridge)

    p = sub.add_parser("train-kge", help="train a KGE baseline")
    _add_graph(p)
    p.add_argument("--split", type=Path, required=True, help="split directory")
    p.add_argument("--family", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--rel-dim", type=int, default=None)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--negatives", type=int, default=8)
    p.add_argument("--loss", choices=("margin", "logistic", "self-adversarial"), default=None)
    p.add_argument("--margin", type=float, default=4.0)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--same-modality", action="store_true", help="corrupt tails within the tail modality")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="checkpoint file")
    p.set_defaults(func=cmd_train_kge)

    p = sub.add_parser("eval", help="tail-prediction evaluation")
    _add_graph(p)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True, help="bridge or KGE checkpoint")
    p.add_argument("--cache", type=Path, default=None)
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--filtered", action="store_true", default=True, help="(default)")
    mode.add_argument("--raw", action="store_true")
    p.add_argument("--on", choices=("test", "valid", "train"), default="test")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 3, 10])
    p.add_argument("--k-retrieval", type=int, default=10)
    p.add_argument("--task", action="append", help="HEAD_MODALITY:RELATION:TAIL_MODALITY (repeatable)")
    p.add_argument("--out", type=Path, default=None, help="report JSON")
    p.add_argument("--ranks", type=Path, default=None, help="per-triple ranks TSV")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="top-k bridged neighbours of one node")
    _add_graph(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--node", required=True)
    p.add_argument("--tail-modality", required=True)
    p.add_argument("--relation", required=True)
    p.add_argument("-k", type=int, default=10)
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("prompt", help="assemble a retrieval-augmented prompt")
    p.add_argument("--template", required=True, choices=("molecule-qa", "molecule-generation", "protein-qa"))
    p.add_argument("--bundle", type=Path, default=None, help="JSON with precomputed lists and fields")
    _add_graph(p, required=False)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--cache", type=Path)
    p.add_argument("--node")
    p.add_argument("--role", action="append", help="NAME:TAIL_MODALITY:RELATION:K (repeatable)")
    p.add_argument("--question")
    p.add_argument("--guidance")
    p.add_argument("--smiles")
    p.add_argument("--sequence")
    p.add_argument("--out", type=Path)
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser("planted-bench", help="train and score the bridge on a planted graph")
    p.add_argument("--preset", default="small")
    p.add_argument("--variant", nargs="+", default=["residual-additive"],
                   choices=("residual-additive", "no-residual", "rotate-multiplicative"))
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_planted_bench)
    return parser


def _single_thread():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    ctx = _single_thread() if args.deterministic else contextlib.nullcontext()
    try:
        with ctx:
            return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"data error: {msg}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
