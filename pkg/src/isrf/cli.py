"""``isrf`` command line: prepare -> reason -> embed -> graph -> train -> eval / ablate / sweep.

Settings come from one JSON config with per-stage sections (``data``, ``train``,
``synth``); command-line flags override config values, which override defaults.
Every stage records input/output hashes in ``<out>/manifest.json`` and is skipped
when its config and inputs are unchanged and its outputs are intact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .data import (export_candidates, export_splits, load_interactions, sample_dr_candidates, save_interactions,
                   split_leave_one_out)
from .io import file_sha256, read_embedding, read_jsonl, write_embedding, write_sections
from .train import TrainConfig, TrainData

log = logging.getLogger("isrf")

COMMANDS = ("prepare", "reason", "embed", "graph", "train", "eval", "infer", "ablate", "sweep", "case-study",
            "synth")


class StageError(RuntimeError):
    pass


# -- config and manifest ------------------------------------------------------

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    cfg.setdefault("_base", str(Path(path).resolve().parent))
    return cfg


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _resolve(base: str | None, p: str | None) -> str | None:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() or base is None else Path(base) / q)


def run_stage(out: Path, stage: str, settings: dict, inputs: list[str], fn: Callable[[], list[str]]) -> bool:
    """Run ``fn`` unless the manifest shows identical settings, inputs and outputs.  Returns True if run."""
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / "manifest.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {"tool_version": __version__, "stages": {}}
    in_hashes = {p: file_sha256(p) for p in inputs}
    chash = config_hash(settings)
    prev = manifest["stages"].get(stage)
    if prev and prev["config_hash"] == chash and prev["inputs"] == in_hashes and all(
            Path(p).exists() and file_sha256(p) == h for p, h in prev["outputs"].items()):
        log.info("stage %s up to date, skipping", stage)
        return False
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    outputs = fn()
    manifest["tool_version"] = __version__
    manifest["stages"][stage] = {"config_hash": chash, "inputs": in_hashes,
                                 "outputs": {p: file_sha256(p) for p in outputs},
                                 "started": started, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return True


# -- data assembly ------------------------------------------------------------

VIEW_KEYS = ("user_pos", "user_neg", "item_pos", "item_neg")


def data_paths(cfg: dict) -> dict:
    base = cfg.get("_base")
    section = dict(cfg.get("data", {}))
    return {k: (_resolve(base, v) if isinstance(v, str) else v) for k, v in section.items()}


def load_train_data(paths: dict) -> tuple[TrainData, list[str]]:
    """Assemble training data from the ``data`` config section; returns the files read."""
    for key in ("interactions", "user_emb", "item_emb"):
        if not paths.get(key):
            raise StageError(f"data.{key} is required")
    ds = load_interactions(paths["interactions"])
    S_u, _ = read_embedding(paths["user_emb"])
    S_v, _ = read_embedding(paths["item_emb"])
    if S_u.shape[0] != ds.n_users or S_v.shape[0] != ds.n_items:
        raise StageError(f"embedding rows {S_u.shape[0]}/{S_v.shape[0]} do not match "
                         f"{ds.n_users} users / {ds.n_items} items")
    used = [paths["interactions"], paths["user_emb"], paths["item_emb"]]
    views = {}
    for key in VIEW_KEYS:
        if paths.get(key):
            views[key], _ = read_embedding(paths[key])
            used.append(paths[key])
    cats = None
    if paths.get("item_categories"):
        raw = json.loads(Path(paths["item_categories"]).read_text())
        cats = [raw.get(rid, "unknown") for rid in ds.item_ids]
        used.append(paths["item_categories"])
    return TrainData.from_dataset(ds, S_u, S_v, views=views, item_categories=cats), used


def train_config(cfg: dict, args) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    for key in ("task", "seed", "max_epochs", "beam", "k", "L_prime"):
        val = getattr(args, key, None)
        if val is not None:
            section[key] = val
    return TrainConfig.from_dict(section)


# -- commands -----------------------------------------------------------------

def cmd_synth(args, cfg):
    from .synth import SynthConfig, generate_planted

    section = dict(cfg.get("synth", {}))
    for key in ("n_users", "n_items", "n_groups", "items_per_user", "noise", "embed_dim", "seed", "sharpness"):
        val = getattr(args, key, None)
        if val is not None:
            section[key] = val
    sc = SynthConfig(**section)
    out = Path(args.out)

    def run():
        pd = generate_planted(sc)
        out.mkdir(parents=True, exist_ok=True)
        inter = out / "interactions.txt"
        save_interactions(inter, pd.dataset)
        ds = load_interactions(inter)
        # reorder rows to the dense order load_interactions assigns
        urows = [int(r[1:]) for r in ds.user_ids]
        irows = [int(r[1:]) for r in ds.item_ids]
        files = [str(inter)]
        for name, mat, rows in (("user_emb", pd.S_u, urows), ("item_emb", pd.S_v, irows),
                                ("user_pos", pd.views["user_pos"], urows), ("user_neg", pd.views["user_neg"], urows),
                                ("item_pos", pd.views["item_pos"], irows), ("item_neg", pd.views["item_neg"], irows)):
            p = out / f"{name}.bin"
            write_embedding(p, mat[rows], space="raw", dtype="f64")
            files.append(str(p))
        cats = out / "item_categories.json"
        cats.write_text(json.dumps({f"i{i}": f"group{g}" for i, g in enumerate(pd.item_groups)}, sort_keys=True))
        groups = out / "user_groups.json"
        groups.write_text(json.dumps({f"u{u}": int(g) for u, g in enumerate(pd.user_groups)}, sort_keys=True))
        files += [str(cats), str(groups)]
        return files

    run_stage(out, "synth", vars(sc), [], run)
    print(f"synthetic data written to {out}")


def cmd_prepare(args, cfg):
    paths = data_paths(cfg)
    inter = args.interactions or paths.get("interactions")
    if not inter:
        raise StageError("--interactions is required")
    out = Path(args.out)

    def run():
        ds = load_interactions(inter)
        splits = split_leave_one_out(ds)
        export_splits(out / "splits.jsonl", splits)
        files = [str(out / "splits.jsonl")]
        for stage in ("valid", "test"):
            p = out / f"candidates_{stage}.jsonl"
            export_candidates(p, sample_dr_candidates(ds, splits, args.n_neg, args.seed, stage))
            files.append(str(p))
        report = {"users": ds.n_users, "items": ds.n_items, "rejected_users": len(ds.rejected_users),
                  "interactions": sum(map(len, ds.sequences))}
        (out / "dataset.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(json.dumps(report, sort_keys=True))
        return files + [str(out / "dataset.json")]

    run_stage(out, "prepare", {"n_neg": args.n_neg, "seed": args.seed}, [inter], run)


def cmd_reason(args, cfg):
    from .reason import (EntitySpec, FileEncoder, FileReasoner, HttpEncoder, HttpReasoner, encode_texts,
                         generate_descriptions, load_store, sample_history)

    client = FileReasoner(args.store) if args.client == "file" else HttpReasoner(model=args.model)
    if args.entities == "items":
        if not args.attributes:
            raise StageError("--attributes (JSON lines {index, attributes}) is required for items")
        specs = [EntitySpec("item", r["index"], r["attributes"]) for r in read_jsonl(args.attributes)]
    else:
        if not (args.interactions and args.item_store):
            raise StageError("--interactions and --item-store are required for users")
        ds = load_interactions(args.interactions)
        items = load_store(args.item_store)
        specs = []
        for u, seq in enumerate(ds.sequences):
            picked = sample_history(seq, args.sample_size, args.seed, u)
            specs.append(EntitySpec("user", u, [items[("item", i)].fused for i in picked]))
    if args.client == "file":
        entity_type = "item" if args.entities == "items" else "user"
        missing = [s.index for s in specs if (entity_type, s.index) not in client.records]
        if missing:
            raise StageError(f"file-backed store lacks {len(missing)} entities, first: {missing[:5]}")
        report_records = [client.records[(entity_type, s.index)] for s in specs]
    else:
        rep = generate_descriptions(client, specs, args.store, max_in_flight=args.threads)
        if rep.failures:
            raise StageError(f"{len(rep.failures)} entities failed; rerun to resume")
        store = load_store(args.store)
        entity_type = "item" if args.entities == "items" else "user"
        report_records = [store[(entity_type, s.index)] for s in specs]
    print(f"{len(report_records)} semantic records available in {args.store}")
    if args.embed_out:
        encoder = FileEncoder(args.encoder_file) if args.encoder == "file" else HttpEncoder()
        mat = encode_texts(encoder, report_records, args.field)
        write_embedding(args.embed_out, mat, space="raw", dtype="f32")
        print(f"embeddings {mat.shape} written to {args.embed_out}")


def cmd_embed(args, cfg):
    from .embed import pca_fit, pca_transform

    paths = data_paths(cfg)
    src = args.item_emb or paths.get("item_emb")
    if not src:
        raise StageError("--item-emb is required")
    d_m = args.d_m or cfg.get("train", {}).get("d_m", 64)
    out = Path(args.out)

    def run():
        S, _ = read_embedding(src)
        model = pca_fit(S, d_m)
        model.save(out / "pca.bin")
        write_embedding(out / "item_reduced.bin", pca_transform(model, S), space="reduced", dtype="f64")
        return [str(out / "pca.bin"), str(out / "item_reduced.bin")]

    run_stage(out, "embed", {"d_m": d_m}, [src], run)


def cmd_graph(args, cfg):
    from .graphs import build_interaction_graph, build_user_relation

    paths = data_paths(cfg)
    out_path = Path(args.out)
    out_dir = out_path.parent
    tcfg = cfg.get("train", {})
    if args.kind == "interaction":
        src = args.interactions or paths.get("interactions")
        if not src:
            raise StageError("--interactions is required")

        def run():
            ds = load_interactions(src)
            build_interaction_graph(split_leave_one_out(ds).train, ds.n_users, ds.n_items).save(out_path)
            return [str(out_path)]
        settings = {"kind": "interaction"}
    else:
        src = args.user_emb or paths.get("user_emb")
        if not src:
            raise StageError("--user-emb is required")
        k = args.k if args.k is not None else tcfg.get("k", 10)
        sym = tcfg.get("relation_symmetrize", "union")

        def run():
            S_u, _ = read_embedding(src)
            g = build_user_relation(S_u, k, sym)
            g.save(out_path)
            if args.truth:
                from .synth import group_recovery_score
                ds_groups = json.loads(Path(args.truth).read_text())
                truth = np.asarray([ds_groups[k_] for k_ in sorted(ds_groups, key=lambda s: int(s[1:]))])
                print(f"group purity {group_recovery_score(g, truth):.4f}")
            return [str(out_path)]
        settings = {"kind": "relation", "k": k, "symmetrize": sym}
    run_stage(out_dir, f"graph-{args.kind}", settings, [src], run)
    print(f"graph written to {out_path}")


def cmd_train(args, cfg):
    from .train import fit

    tc = train_config(cfg, args)
    paths = data_paths(cfg)
    out = Path(args.out)
    data, used = load_train_data(paths)

    def run():
        res = fit(tc, data, out_dir=out)
        print(f"best epoch {res.best_epoch}; checkpoint at {out / 'checkpoint.bin'}")
        return [str(out / "checkpoint.bin"), str(out / "history.csv"), str(out / "config.json")]

    run_stage(out, "train", tc.to_dict(), used, run)


def _load_state(args, cfg):
    from .train import ModelState

    data, used = load_train_data(data_paths(cfg))
    if not args.checkpoint:
        raise StageError("--checkpoint is required")
    state = ModelState.load(args.checkpoint, data)
    return state, data, used + [args.checkpoint]


def cmd_eval(args, cfg):
    from .evaluate import MetricTable, evaluate_state

    state, data, used = _load_state(args, cfg)
    if args.beam:
        state.config = state.config.replace(beam=args.beam)
    out = Path(args.out)

    def run():
        table = MetricTable()
        table.add(state.config.task, "full", evaluate_state(state, data, args.stage))
        table.to_csv(out / "metrics.csv")
        (out / "metrics.txt").write_text(table.to_text() + "\n")
        print(table.to_text())
        return [str(out / "metrics.csv"), str(out / "metrics.txt")]

    run_stage(out, "eval", {"stage": args.stage, "beam": state.config.beam}, used, run)


def cmd_infer(args, cfg):
    from .evaluate import model_ranker

    state, data, _ = _load_state(args, cfg)
    if args.task and args.task.upper() != state.config.task:
        raise StageError(f"checkpoint was trained for {state.config.task}, not {args.task.upper()}")
    beam = args.beam or state.config.beam
    rank = model_ranker(state, data, "test", beam)
    users = [args.user] if args.user is not None else range(state.n_users)
    for u in users:
        cands = None
        if state.config.task == "DR":
            cands = [c for c in data.dr_candidates("test", state.config.n_neg, state.config.seed)
                     if c.user == u][0].items
        ranked = rank(u, data.splits.history(u, "test"), cands)[:args.top]
        print(json.dumps({"user": data.dataset.user_ids[u], "items": [data.dataset.item_ids[i] for i in ranked]}))


def _table_outputs(table, out: Path, name: str) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / f"{name}.csv")
    (out / f"{name}.txt").write_text(table.to_text() + "\n")
    print(table.to_text())
    return [str(out / f"{name}.csv"), str(out / f"{name}.txt")]


def cmd_ablate(args, cfg):
    from .evaluate import run_ablations, run_variants

    tc = train_config(cfg, args)
    data, used = load_train_data(data_paths(cfg))
    out = Path(args.out)
    runner = run_variants if args.variants else run_ablations
    name = "variants" if args.variants else "ablations"
    run_stage(out, name, tc.to_dict(), used, lambda: _table_outputs(runner(tc, data), out, name))


def cmd_sweep(args, cfg):
    from .evaluate import sweep

    tc = train_config(cfg, args)
    data, used = load_train_data(data_paths(cfg))
    values = [int(v) for v in args.values.split(",")]
    out = Path(args.out)
    name = f"sweep_{args.param}"
    run_stage(out, name, {**tc.to_dict(), "values": values}, used,
              lambda: _table_outputs(sweep(args.param, values, tc, data), out, name))


def cmd_case_study(args, cfg):
    from .evaluate import case_study

    state, data, used = _load_state(args, cfg)
    user = data.dataset.user_index.get(str(args.user), None)
    if user is None:
        user = int(args.user)
    report = case_study(state, data, user, args.top_m)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isrf", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"isrf {__version__}")
    p.add_argument("--config", help="JSON config with data/train/synth sections")
    p.add_argument("--threads", type=int, default=4, help="cap on concurrent workers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--config", dest="sub_config", help=argparse.SUPPRESS)
        return sp

    sp = add("synth", cmd_synth, "generate planted-group synthetic data")
    for name, typ in (("n-users", int), ("n-items", int), ("n-groups", int), ("items-per-user", int),
                      ("noise", float), ("embed-dim", int), ("seed", int), ("sharpness", float)):
        sp.add_argument(f"--{name}", type=typ)
    sp.add_argument("--out", required=True)

    sp = add("prepare", cmd_prepare, "split interactions and sample DR candidates")
    sp.add_argument("--interactions")
    sp.add_argument("--n-neg", type=int, default=99)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("reason", cmd_reason, "three-stage semantic descriptions and their embeddings")
    sp.add_argument("--entities", choices=["items", "users"], required=True)
    sp.add_argument("--client", choices=["file", "http"], default="file")
    sp.add_argument("--store", required=True)
    sp.add_argument("--model", default="reasoner")
    sp.add_argument("--attributes", help="items: JSON lines {index, attributes}")
    sp.add_argument("--interactions", help="users: interactions file")
    sp.add_argument("--item-store", help="users: semantic store holding fused item texts")
    sp.add_argument("--sample-size", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--embed-out")
    sp.add_argument("--encoder", choices=["file", "http"], default="file")
    sp.add_argument("--encoder-file")
    sp.add_argument("--field", choices=["fused", "positive", "negative"], default="fused")

    sp = add("embed", cmd_embed, "PCA-reduce raw item embeddings")
    sp.add_argument("--item-emb")
    sp.add_argument("--d-m", type=int)
    sp.add_argument("--out", required=True)

    sp = add("graph", cmd_graph, "build a normalized interaction or user-relation graph")
    sp.add_argument("--kind", choices=["interaction", "relation"], required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--interactions")
    sp.add_argument("--user-emb")
    sp.add_argument("--truth", help="user_groups.json from synth; prints relation purity")
    sp.add_argument("--out", required=True)

    def train_flags(sp):
        sp.add_argument("--task", choices=["SR", "DR", "sr", "dr"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--max-epochs", type=int, dest="max_epochs")

    sp = add("train", cmd_train, "fit a model")
    train_flags(sp)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--stage", choices=["valid", "test"], default="test")
    sp.add_argument("--beam", type=int)
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "print beam-search recommendations")
    sp.add_argument("--task", choices=["sr", "dr", "SR", "DR"])
    sp.add_argument("--beam", type=int)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--user", type=int)
    sp.add_argument("--top", type=int, default=10)

    sp = add("ablate", cmd_ablate, "ablation (or semantic-variant) table")
    train_flags(sp)
    sp.add_argument("--variants", action="store_true", help="run semantic variants instead")
    sp.add_argument("--out", required=True)

    sp = add("sweep", cmd_sweep, "sweep L' or k")
    train_flags(sp)
    sp.add_argument("--param", choices=["Lprime", "k"], required=True)
    sp.add_argument("--values", required=True, help="comma-separated integers")
    sp.add_argument("--out", required=True)

    sp = add("case-study", cmd_case_study, "neighbour / recommendation report for one user")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--user", required=True)
    sp.add_argument("--top-m", type=int, default=10)
    sp.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.sub_config or args.config)
    try:
        args.func(args, cfg)
    except (StageError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"isrf {args.command}: stage failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
