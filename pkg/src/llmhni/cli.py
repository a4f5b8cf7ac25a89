"""Command-line entry point for the staged pipeline.

Every command works inside a run directory (``--run-dir``, else ``$RUN_DIR``,
else ``runs/<config hash>``) and writes the resolved configuration there as
``config.cfg``. Stages hand artifacts to each other through that directory:

    prepare -> pretrain -> align -> candidates -> rate -> edit-graph -> train -> evaluate

Exit codes: 0 success, 1 bad input, 2 missing upstream artifact (the stage is
named on stderr), 3 relevance-provider failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .backbone import propagate
from .data import (TRAIN, InteractionDataset, NoiseSpec, ParseError, inject_noise, load_dataset, load_profiles,
                   save_dataset, save_profiles, split_dataset)
from .evaluation import NOISE_GRID, evaluate, noise_sweep, sample_diagnostics, save_diagnostics
from .graph import apply_relevance_edits, build_graph, load_edges, normalize, save_edges
from .oracle import (FileProvider, HttpProvider, MockProvider, ProviderError, UnparseableRating, VerdictCache,
                     build_candidates, classify, load_candidates, load_pairs, load_verdicts, rate_candidates,
                     save_candidates, save_pairs, save_verdicts)
from .semantic import (Projector, ProjectorConfig, build_alignment_labels, ingest_llm_embeddings, project,
                       train_projector, write_embedding_file)
from .trainer import Checkpoint, StageError, TrainConfig, Trainer, TrainingDiverged, pretrain

log = logging.getLogger("llmhni")

COMMANDS = ("prepare", "pretrain", "align", "candidates", "rate", "edit-graph", "train", "evaluate",
            "noise-sweep", "diagnose")

# artifact file names inside a run directory
DATA, META, PROFILES = "data.tsv", "dataset.json", "profiles.jsonl"
USER_EMB, ITEM_EMB, RELEVANT = "user_emb.txt", "item_emb.txt", "relevant.tsv"
PRETRAIN, SCORES, PROJECTOR = "pretrain.npz", "pretrain_scores.npy", "projector.npz"
CANDIDATES, VERDICTS, CACHE = "candidates.tsv", "verdicts.jsonl", "verdict_cache.jsonl"
HARD, NOISY, EDITED = "hard.tsv", "noisy.tsv", "edited_edges.tsv"
MAIN, TRAIN_LOG, METRICS = "main.npz", "train_log.csv", "metrics.csv"


class UsageError(ValueError):
    pass


# -- configuration -----------------------------------------------------------
def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    g = parent.add_argument_group("run")
    g.add_argument("--config", help="flat 'key = value' config file; flags override it")
    g.add_argument("--run-dir", help="artifact directory (default $RUN_DIR, else runs/<config hash>)")
    g.add_argument("-v", "--verbose", action="store_true")
    keys = parent.add_argument_group("config keys")
    for f in dataclasses.fields(TrainConfig):
        note = f.metadata.get("note", "")
        keys.add_argument(_flag(f.name), dest=f"cfg_{f.name}", metavar=f.type.upper() if f.type != "str" else "STR",
                          help=f"{note} [default: {f.default}]")
    return parent


def resolve_config(args) -> TrainConfig:
    """Flags over the --config file (else the run dir's config.cfg) over defaults."""
    overrides = {}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = TrainConfig.coerce(f.name, value)
    explicit = args.run_dir or os.environ.get("RUN_DIR")
    if args.config:
        return TrainConfig.load(args.config, **overrides)
    if explicit and (Path(explicit) / "config.cfg").exists():
        return TrainConfig.load(Path(explicit) / "config.cfg", **overrides)
    return TrainConfig(**overrides)


def resolve_run_dir(args, cfg: TrainConfig) -> Path:
    path = Path(args.run_dir or os.environ.get("RUN_DIR") or Path("runs") / cfg.hash())
    path.mkdir(parents=True, exist_ok=True)
    return path


# -- artifact helpers --------------------------------------------------------
def _need(run: Path, name: str, stage: str, command: Optional[str] = None) -> Path:
    path = run / name
    if not path.exists():
        raise StageError(stage, f"missing {name} in {run}; run '{command or stage}' first")
    return path


def _atomic(path: Path, writer: Callable[[Path], None]) -> None:
    tmp = path.with_name(path.name + ".part")
    writer(tmp)
    tmp.replace(path)


def _load_data(run: Path) -> InteractionDataset:
    meta = json.loads(_need(run, META, "prepare").read_text())
    return load_dataset(_need(run, DATA, "prepare"), sizes=(meta["num_users"], meta["num_items"]))


def _load_raw(run: Path):
    return ingest_llm_embeddings(_need(run, USER_EMB, "prepare"), _need(run, ITEM_EMB, "prepare"))


def _load_profiles(run: Path):
    return load_profiles(run / PROFILES) if (run / PROFILES).exists() else None


def _load_projected(run: Path, data: InteractionDataset):
    projector = Projector.load(_need(run, PROJECTOR, "projector", "align"))
    return project(projector, _load_raw(run))


def _copy_input(src: Optional[str], dest: Path) -> None:
    if src:
        shutil.copyfile(src, dest)


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


# -- commands ----------------------------------------------------------------
def cmd_prepare(args, cfg: TrainConfig, run: Path) -> int:
    if args.synthetic:
        from .synthetic import generate_corpus
        corpus = generate_corpus(num_users=args.num_users, num_items=args.num_items, seed=args.data_seed)
        ds = corpus.dataset
        save_pairs(corpus.relevant, run / RELEVANT)
        write_embedding_file(run / USER_EMB, corpus.raw.user)
        write_embedding_file(run / ITEM_EMB, corpus.raw.item)
        save_profiles(corpus.profiles, run / PROFILES)
    else:
        if not args.data:
            raise UsageError("prepare needs --data PATH or --synthetic")
        ds = load_dataset(args.data, format=args.format, remap_out=run / "remap.tsv")
        if args.user_emb and args.item_emb:
            raw = ingest_llm_embeddings(args.user_emb, args.item_emb, ds.user_ids, ds.item_ids)
            write_embedding_file(run / USER_EMB, raw.user)
            write_embedding_file(run / ITEM_EMB, raw.item)
        _copy_input(args.profiles, run / PROFILES)
        _copy_input(args.relevant, run / RELEVANT)
    if not args.keep_splits:
        ds = split_dataset(ds, tuple(args.ratios), seed=args.split_seed)
    if args.noise_ratio > 0:
        ds = inject_noise(ds, NoiseSpec(args.noise_ratio, args.noise_seed))
    _atomic(run / DATA, lambda p: save_dataset(ds, p))
    (run / META).write_text(json.dumps({"num_users": ds.num_users, "num_items": ds.num_items,
                                        "interactions": len(ds), "injected": int(ds.injected.sum())}))
    print(f"prepared {ds.num_users} users, {ds.num_items} items, {len(ds)} interactions "
          f"({int(ds.injected.sum())} injected) in {run}")
    return 0


def cmd_pretrain(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    ck = pretrain(cfg, data)
    rep = propagate(ck.best_table, normalize(build_graph(data)), cfg.num_layers)
    scores = rep.user @ rep.item.T

    def write_scores(p):
        with open(p, "wb") as fh:
            np.save(fh, scores)

    _atomic(run / SCORES, write_scores)
    ck.save(run / PRETRAIN)
    print(f"pretrain: best valid Recall@20 {ck.best_metric:.4f} at epoch {ck.best_epoch}; "
          f"checkpoint {_file_digest(run / PRETRAIN)}")
    return 0


def cmd_align(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    raw = _load_raw(run)
    labels = build_alignment_labels(raw, data, cfg.N)
    pcfg = ProjectorConfig(d_rec=cfg.d_rec, hidden=cfg.al_hidden, tau=cfg.tau_al, num_negatives=cfg.al_negatives,
                           epochs=cfg.al_epochs, batch_size=cfg.batch_size, lr=cfg.al_lr, seed=cfg.seed)
    projector = train_projector(raw, labels, data, pcfg)
    projector.save(run / PROJECTOR)
    n_labels = sum(len(v) for v in labels.values())
    print(f"align: {n_labels} reliable positives, final loss {projector.history[-1]:.4f}")
    return 0


def cmd_candidates(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    scores = np.load(_need(run, SCORES, "pretrain"))
    cands = build_candidates(scores, data.positives_by_user(TRAIN), cfg.n1, cfg.n2, cfg.candidate_mode, cfg.seed)
    _atomic(run / CANDIDATES, lambda p: save_candidates(cands, p))
    print(f"candidates: {len(cands)} pairs")
    return 0


def _provider(args, run: Path):
    if args.provider == "mock":
        path = Path(args.relevant) if args.relevant else run / RELEVANT
        if not path.exists():
            raise StageError("prepare", f"mock provider needs a hidden relevance set ({path})")
        return MockProvider(load_pairs(path), flip_rate=args.flip_rate, seed=args.mock_seed)
    if args.provider == "file":
        if not args.verdict_file:
            raise UsageError("--provider file needs --verdict-file")
        return FileProvider(args.verdict_file)
    endpoint = args.endpoint or os.environ.get(args.endpoint_env)
    if not endpoint:
        raise UsageError(f"--provider http needs --endpoint or ${args.endpoint_env}")
    return HttpProvider(endpoint, api_key_env=args.api_key_env, timeout=args.timeout, retries=args.retries)


def cmd_rate(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    cands = load_candidates(_need(run, CANDIDATES, "candidates"))
    scores = np.load(_need(run, SCORES, "pretrain"))
    provider = _provider(args, run)
    cache = VerdictCache(run / CACHE, provider.tag)
    verdicts = rate_candidates(provider, cands, scores, data.positives_by_user(TRAIN), _load_profiles(run),
                               cfg.K_item, cache, max_workers=args.workers)
    _atomic(run / VERDICTS, lambda p: save_verdicts(verdicts, p))
    print(f"rate: {len(verdicts)} verdicts via {provider.tag} ({getattr(provider, 'calls', 0)} provider calls)")
    return 0


def cmd_edit_graph(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    cands = load_candidates(_need(run, CANDIDATES, "candidates"))
    verdicts = load_verdicts(_need(run, VERDICTS, "rate"))
    hard, noisy = classify(verdicts, cands)
    edited = apply_relevance_edits(build_graph(data), hard, noisy)
    _atomic(run / HARD, lambda p: save_pairs(hard, p))
    _atomic(run / NOISY, lambda p: save_pairs(noisy, p))
    _atomic(run / EDITED, lambda p: save_edges(edited, p))
    print(f"edit-graph: |C_H| = {len(hard)}, |C_N| = {len(noisy)}, |E'| = {len(edited)}")
    return 0


def _trainer(cfg: TrainConfig, run: Path, data: InteractionDataset) -> Trainer:
    if cfg.mode == "plain_bpr":
        return Trainer(cfg, data)
    projected = _load_projected(run, data) if cfg.negative_sampler == "semantic" else None
    edited = load_edges(_need(run, EDITED, "edit-graph"), data.num_users, data.num_items)
    return Trainer(cfg, data, build_graph(data), edited, projected,
                   load_pairs(_need(run, HARD, "edit-graph")), load_pairs(_need(run, NOISY, "edit-graph")))


def cmd_train(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    trainer = _trainer(cfg, run, data)
    if args.resume and (run / MAIN).exists():
        trainer.resume(Checkpoint.load(run / MAIN, cfg.hash()))
    ck = trainer.fit(checkpoint_path=run / MAIN, log_path=run / TRAIN_LOG)
    report = evaluate(trainer.representations(ck.best_table), data)
    report.to_csv(run / METRICS)
    print(f"train ({cfg.mode}): best epoch {ck.best_epoch}")
    print(report.table())
    return 0


def cmd_evaluate(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    ck = Checkpoint.load(_need(run, MAIN, "train"))
    trainer = _trainer(cfg, run, data)
    report = evaluate(trainer.representations(ck.best_table), data)
    report.to_csv(run / METRICS)
    print(report.table())
    if args.compare:
        other_run = Path(args.compare)
        other_cfg = TrainConfig.load(_need(other_run, "config.cfg", "train"))
        other_ck = Checkpoint.load(_need(other_run, MAIN, "train"))
        other = evaluate(_trainer(other_cfg, other_run, data).representations(other_ck.best_table), data)
        for k in report.ks:
            t, p = report.t_test(other, "recall", k)
            print(f"paired t-test Recall@{k} vs {other_run}: t = {t:.3f}, p = {p:.4g}")
    return 0


def cmd_noise_sweep(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    if data.injected.any():
        raise UsageError("noise-sweep needs a clean prepared dataset (prepare without --noise-ratio)")
    raw = _load_raw(run) if "llmhni" in args.modes else None
    relevant = load_pairs(_need(run, RELEVANT, "prepare")) if "llmhni" in args.modes else set()
    report = noise_sweep(cfg, data, args.ratios, args.modes, raw=raw,
                         provider_factory=lambda _: MockProvider(relevant, args.flip_rate, args.mock_seed),
                         profiles=_load_profiles(run), noise_seed=args.noise_seed)
    report.to_csv(run / "robustness.csv")
    print(report.table())
    return 0


def cmd_diagnose(args, cfg: TrainConfig, run: Path) -> int:
    data = _load_data(run)
    name, stage = (MAIN, "train") if args.model == "main" else (PRETRAIN, "pretrain")
    ck = Checkpoint.load(_need(run, name, stage))
    rep = propagate(ck.best_table, normalize(build_graph(data)), cfg.num_layers)
    rows = sample_diagnostics(rep, data, seed=cfg.seed)
    save_diagnostics(rows, run / "diagnostics.csv")
    for kind in ("loss", "score"):
        for cat in ("easy", "hard", "noisy"):
            vals = [r["value"] for r in rows if r["kind"] == kind and r["category"] == cat]
            if vals:
                print(f"{kind:5s} {cat:5s} n={len(vals):5d} mean={np.mean(vals):.4f} sd={np.std(vals):.4f}")
    return 0


HANDLERS: Dict[str, Callable] = {
    "prepare": cmd_prepare, "pretrain": cmd_pretrain, "align": cmd_align, "candidates": cmd_candidates,
    "rate": cmd_rate, "edit-graph": cmd_edit_graph, "train": cmd_train, "evaluate": cmd_evaluate,
    "noise-sweep": cmd_noise_sweep, "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    keys = "\n".join(f"  {f.name} = {f.default}  ({f.metadata.get('note', '')})" for f in dataclasses.fields(TrainConfig))
    parser = argparse.ArgumentParser(
        prog="llmhni", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Staged training of denoised implicit-feedback recommenders.",
        epilog="config keys (settable in --config files or as --key-name flags):\n" + keys)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "prepare": "load or synthesize interactions, split them and optionally inject noise",
        "pretrain": "train the plain BPR recommender used for candidate selection",
        "align": "train the semantic projector",
        "candidates": "pick per-user oracle candidates from pretrained scores",
        "rate": "collect user- and item-based relevance ratings",
        "edit-graph": "classify candidates and write the edited interaction graph",
        "train": "main training (llmhni or plain_bpr control)",
        "evaluate": "test-split Recall/NDCG for the trained model",
        "noise-sweep": "robustness curves over injected-noise ratios",
        "diagnose": "easy/hard/noisy loss and score distributions",
    }
    subs = {name: sub.add_parser(name, parents=[parent], help=helps[name], description=helps[name])
            for name in COMMANDS}

    p = subs["prepare"]
    p.add_argument("--data", help="interaction file (TSV or JSONL)")
    p.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    p.add_argument("--synthetic", action="store_true", help="generate a latent-factor corpus instead of --data")
    p.add_argument("--num-users", type=int, default=200)
    p.add_argument("--num-items", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--user-emb", help="user embedding file ('count dim' header, then 'id v...')")
    p.add_argument("--item-emb", help="item embedding file")
    p.add_argument("--profiles", help="profile JSONL with id/kind/text records")
    p.add_argument("--relevant", help="hidden relevance pairs for the mock provider")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.6, 0.2, 0.2), metavar=("TRAIN", "VALID", "TEST"))
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--keep-splits", action="store_true", help="use split columns from --data as they are")
    p.add_argument("--noise-ratio", type=float, default=0.0)
    p.add_argument("--noise-seed", type=int, default=0)

    for name in ("rate", "noise-sweep"):
        p = subs[name]
        p.add_argument("--flip-rate", type=float, default=0.0, help="mock provider answer flip probability")
        p.add_argument("--mock-seed", type=int, default=0)
    p = subs["rate"]
    p.add_argument("--provider", choices=("mock", "file", "http"), default="mock")
    p.add_argument("--relevant", help="hidden relevance pairs (default: run dir relevant.tsv)")
    p.add_argument("--verdict-file", help="verdict JSONL replayed by the file provider")
    p.add_argument("--endpoint", help="HTTP rating endpoint URL")
    p.add_argument("--endpoint-env", default="LLMHNI_ENDPOINT", help="env var holding the endpoint URL")
    p.add_argument("--api-key-env", default="LLMHNI_API_KEY", help="env var holding the API key")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--workers", type=int, default=1)

    subs["train"].add_argument("--resume", action="store_true", help="continue from main.npz in the run dir")
    subs["evaluate"].add_argument("--compare", help="another run dir; prints paired t-tests")
    p = subs["noise-sweep"]
    p.add_argument("--ratios", type=float, nargs="+", default=list(NOISE_GRID))
    p.add_argument("--modes", nargs="+", choices=("plain_bpr", "llmhni"), default=["plain_bpr", "llmhni"])
    p.add_argument("--noise-seed", type=int, default=0)
    subs["diagnose"].add_argument("--model", choices=("pretrain", "main"), default="pretrain")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        run = resolve_run_dir(args, cfg)
        cfg.dump(run / "config.cfg")
        return HANDLERS[args.command](args, cfg, run)
    except StageError as exc:
        print(f"error: stage '{exc.stage}' not done: {exc}", file=sys.stderr)
        return 2
    except ProviderError as exc:
        print(f"error: relevance provider failed: {exc}", file=sys.stderr)
        return 3
    except UnparseableRating as exc:
        print(f"error: relevance provider returned no rating: {exc}; raw response: {exc.raw!r}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ParseError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
