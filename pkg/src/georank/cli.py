"""Command-line pipeline driver.

Subcommands cover the full flow: synth/ingest -> retrieve -> caption/embed ->
build-samples -> train -> rerank -> eval/compare, plus stability and
gradcheck. Values resolve as: command-line flag, then config file
(``--config`` or ``GEOVLM_CONFIG``), then built-in default. Exit codes:
0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cvlang, evaluator, geostore, reranker, retriever, trainer
from .geostore import GeostoreError, Store, StoreManifest, SynthConfig
from .reranker import RerankerConfig
from .trainer import TrainConfig

CONFIG_ENV = "GEOVLM_CONFIG"


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in str(text).split(",") if x.strip() != "")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).split(",") if x.strip() != "")


# config-file keys and how to parse their values; unknown keys are errors
CONFIG_SCHEMA = {
    "store": str,
    "k": int,
    "accum32": _bool,
    "seed": int,
    "locations": int,
    "group_size": int,
    "image_dim": int,
    "text_dim": int,
    "image_noise": float,
    "group_spread": float,
    "text_margin": float,
    "queries_per_location": int,
    "semipositive_regime": str,
    "epochs": int,
    "lr": float,
    "margin": float,
    "optimizer": str,
    "batch_size": int,
    "shuffle_seed": int,
    "val_split": float,
    "loss_on": str,
    "grad_clip": float,
    "latent_dim": int,
    "aligner_layers": int,
    "aligner_hidden": int,
    "ln_epsilon": float,
    "init_seed": int,
    "shared_projections": _bool,
    "ks": _int_list,
    "thresholds": _float_list,
    "earth_radius_km": float,
    "endpoint": str,
    "model": str,
}


def load_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for ln, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}, line {ln}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"{path}, line {ln}: unknown config key '{key}'")
        values[key] = value.strip()
    return values


class _Resolver:
    """flag > config file > default, with config values parsed by schema."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        path = args.config or os.environ.get(CONFIG_ENV)
        self.file_values = load_config_file(path) if path else {}

    def get(self, key: str, default=None):
        flag = getattr(self.args, key, None)
        if flag is not None:
            return flag
        if key in self.file_values:
            return CONFIG_SCHEMA[key](self.file_values[key])
        return default

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise ValueError(f"missing required setting '{key}' (flag, config file, or ${CONFIG_ENV})")
        return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _store_coords(store: Store) -> dict | None:
    coords = {}
    for rid in store.ref_ids:
        c = store.coord_of(rid)
        if c is None:
            return None
        coords[rid] = c
    return coords


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _Resolver(args)
    synth = SynthConfig(
        n_locations=cfg.get("locations", 100),
        group_size=cfg.get("group_size", 4),
        image_dim=cfg.get("image_dim", 64),
        text_dim=cfg.get("text_dim", 64),
        image_noise=cfg.get("image_noise", 0.7),
        group_spread=cfg.get("group_spread", 0.15),
        text_margin=cfg.get("text_margin", 0.95),
        queries_per_location=cfg.get("queries_per_location", 1),
        semipositive_regime=cfg.get("semipositive_regime", "negative"),
    )
    store, groups = geostore.generate_synthetic(synth, cfg.get("seed", 0))
    store.save(args.out)
    geostore.save_groups(groups, Path(args.out) / geostore.GROUPS_FILE)
    print(f"synthetic store: {len(store.ref_ids)} references, {len(store.query_ids)} queries -> {args.out}")
    return 0


def cmd_ingest(args) -> int:
    manifest = StoreManifest.read(Path(args.manifest))
    store = geostore.ingest(
        args.out,
        manifest,
        args.refs_emb,
        ref_captions=args.refs_captions,
        ref_coords=args.refs_coords,
        ref_text_embeddings=args.refs_text_emb,
        query_embeddings=args.queries_emb,
        query_captions=args.queries_captions,
        query_coords=args.queries_coords,
        query_text_embeddings=args.queries_text_emb,
        query_truth=args.truth,
    )
    print(f"ingested {len(store.ref_ids)} references, {len(store.query_ids)} queries -> {args.out}")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _Resolver(args)
    store = Store.load(cfg.require("store"))
    k = cfg.get("k", 10)
    rankings = retriever.rank_store_queries(store, k, accum32=bool(cfg.get("accum32", False)))
    retriever.save_rankings(rankings, args.out)
    print(f"ranked {len(rankings)} queries at k={k} -> {args.out}")
    return 0


def cmd_caption(args) -> int:
    bank = cvlang.load_question_bank(args.bank)
    sheets = cvlang.sheets_from_jsonl(args.sheets)
    problems = []
    rendered = []
    for sheet in sheets:
        violations = cvlang.validate_sheet(sheet, bank)
        if violations:
            problems.append(f"{sheet.image_id}: " + "; ".join(violations))
        else:
            rendered.append({"description": cvlang.render_description(sheet, bank), "id": sheet.image_id})
    if problems:
        raise ValueError("invalid answer sheets:\n" + "\n".join(problems))
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in rendered:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")
    print(f"rendered {len(rendered)} descriptions -> {args.out}")
    return 0


def _read_texts(path: str | Path) -> list[tuple[str, str]]:
    out = []
    for ln, rec in geostore._read_jsonl(path):
        text = rec.get("description", rec.get("caption", rec.get("text")))
        rid = rec.get("id", rec.get("image_id"))
        if not isinstance(rid, str) or not isinstance(text, str):
            raise ValueError(f"{path}, line {ln}: need 'id' (or 'image_id') and one of description/caption/text")
        out.append((rid, text))
    return out


def cmd_embed(args) -> int:
    cfg = _Resolver(args)
    endpoint = cvlang.EmbedEndpointConfig(
        url=cfg.get("endpoint", "mock:"),
        model=cfg.get("model", "text-embedding-3-small"),
        text_dim=cfg.get("text_dim", 1536),
    )
    pairs = _read_texts(args.texts)
    vectors = cvlang.embed_texts([t for _, t in pairs], endpoint)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for (rid, _), vec in zip(pairs, vectors):
                rec = {"embedding": [float(x) for x in vec], "id": rid}
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        print(f"embedded {len(pairs)} texts (dim {endpoint.text_dim}) -> {args.out}")
    if args.attach:
        side = args.side or "refs"
        if side not in ("refs", "queries"):
            raise ValueError(f"--side must be refs or queries, got '{side}'")
        store = Store.load(args.attach)
        if endpoint.text_dim != store.manifest.text_dim:
            raise ValueError(
                f"embedding dim {endpoint.text_dim} does not match store text_dim {store.manifest.text_dim}"
            )
        known = store.ref_ids if side == "refs" else store.query_ids
        known_set = set(known)
        by_id = {}
        for (rid, _), vec in zip(pairs, vectors):
            if rid not in known_set:
                raise ValueError(f"text id '{rid}' not found among store {side}")
            by_id[rid] = vec
        ordered = [rid for rid in known if rid in by_id]
        geostore.write_embedding_matrix(np.stack([by_id[r] for r in ordered]), Path(args.attach) / f"{side}.txt.emb")
        geostore._write_ids(ordered, Path(args.attach) / f"{side}.txt.ids")
        print(f"attached {len(ordered)} text embeddings to {args.attach} ({side})")
    return 0


def cmd_build_samples(args) -> int:
    cfg = _Resolver(args)
    store = Store.load(cfg.require("store"))
    rankings = retriever.load_rankings(args.rankings)
    semipositives = None
    if args.exclude_semipositives:
        groups_path = args.groups or Path(cfg.require("store")) / geostore.GROUPS_FILE
        groups = geostore.load_groups(groups_path)
        semipositives = geostore.semipositive_map(groups, store)
    queries = [store.query(qid) for qid in store.query_ids]
    samples, skipped = trainer.build_training_samples(queries, rankings, semipositives)
    trainer.save_samples(samples, args.out)
    print(f"built {len(samples)} training samples ({skipped} skipped: positive outside candidates) -> {args.out}")
    return 0


def _reranker_config(cfg: _Resolver, store: Store) -> RerankerConfig:
    return RerankerConfig(
        image_dim=store.manifest.image_dim,
        text_dim=store.manifest.text_dim,
        latent_dim=cfg.get("latent_dim", 512),
        aligner_layers=cfg.get("aligner_layers", 2),
        aligner_hidden=cfg.get("aligner_hidden", 512),
        ln_epsilon=cfg.get("ln_epsilon", 1e-5),
        shared_projections=bool(cfg.get("shared_projections", True)),
        init_seed=cfg.get("init_seed", 0),
    )


def cmd_train(args) -> int:
    cfg = _Resolver(args)
    store = Store.load(cfg.require("store"))
    samples = trainer.load_samples(args.samples)
    rr_config = _reranker_config(cfg, store)
    tr_config = TrainConfig(
        margin=cfg.get("margin", 1.0),
        optimizer=cfg.get("optimizer", "adam"),
        lr=cfg.get("lr", 1e-4),
        batch_size=cfg.get("batch_size", 16),
        epochs=cfg.get("epochs", 10),
        shuffle_seed=cfg.get("shuffle_seed", 0),
        grad_clip=cfg.get("grad_clip"),
        loss_on=cfg.get("loss_on", "scores"),
    )
    out = Path(args.out)
    params, report = trainer.train(
        samples, store, rr_config, tr_config, val_split=cfg.get("val_split", 0.2), checkpoint_dir=out
    )
    report.write_csv(out / "train_report.csv")
    report.write_jsonl(out / "train_report.jsonl")
    last = report.epochs[-1] if report.epochs else None
    if last is not None and last.val_r1 is not None:
        print(f"trained {tr_config.epochs} epochs; final val R@1={last.val_r1:.3f} R@5={last.val_r5:.3f} -> {out}")
    else:
        print(f"trained {tr_config.epochs} epochs -> {out}")
    return 0


def cmd_rerank(args) -> int:
    cfg = _Resolver(args)
    store = Store.load(cfg.require("store"))
    params = reranker.load_params(args.checkpoint)
    rankings = retriever.load_rankings(args.rankings)
    out = []
    for r in rankings:
        out.append(reranker.rerank(store.query(r.query_id), r, params, store))
    retriever.save_rankings(out, args.out)
    print(f"reranked {len(out)} rankings -> {args.out}")
    return 0


def _eval_config(cfg: _Resolver) -> evaluator.EvalConfig:
    return evaluator.EvalConfig(
        ks=tuple(cfg.get("ks", (1, 5, 10))),
        thresholds_km=tuple(cfg.get("thresholds", (0.0, 0.5))),
        earth_radius_km=cfg.get("earth_radius_km", 6371.0),
    )


def cmd_eval(args) -> int:
    cfg = _Resolver(args)
    store = Store.load(cfg.require("store"))
    rankings = retriever.load_rankings(args.rankings)
    coords = _store_coords(store)
    metrics = evaluator.evaluate_rankings(rankings, store.ground_truth, _eval_config(cfg), coords)
    evaluator.single_run_files(metrics, args.out)
    print(f"evaluated {metrics['query_count']} rankings -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    cfg = _Resolver(args)
    store = Store.load(cfg.require("store"))
    baseline = retriever.load_rankings(args.baseline)
    reranked = retriever.load_rankings(args.reranked)
    coords = _store_coords(store)
    skipped = 0
    for r in baseline:
        truth = set(store.ground_truth.get(r.query_id, ()))
        if not any(rid in truth for rid, _ in r.entries):
            skipped += 1
    report = evaluator.compare_rankings(
        baseline, reranked, store.ground_truth, _eval_config(cfg), coords, skipped_query_count=skipped
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    report.write_svg(out / "report.svg")
    deltas = ", ".join(f"ΔR@{k}={v['delta']:+.4f}" for k, v in report.recall.items())
    print(f"compared {report.query_count} queries ({skipped} without positive in candidates): {deltas} -> {out}")
    return 0


def cmd_stability(args) -> int:
    cfg = _Resolver(args)
    corpus_a = dict(_read_texts(args.corpus_a))
    corpus_b = dict(_read_texts(args.corpus_b))

    def embeddings_for(path, corpus):
        if path:
            return {rec["id"]: np.asarray(rec["embedding"], np.float32) for _, rec in geostore._read_jsonl(path)}
        endpoint = cvlang.EmbedEndpointConfig(
            url=cfg.get("endpoint", "mock:"),
            model=cfg.get("model", "text-embedding-3-small"),
            text_dim=cfg.get("text_dim", 1536),
        )
        ids = sorted(corpus)
        vecs = cvlang.embed_texts([corpus[i] for i in ids], endpoint)
        return dict(zip(ids, vecs))

    report = cvlang.stability_report(
        corpus_a, corpus_b, embeddings_for(args.emb_a, corpus_a), embeddings_for(args.emb_b, corpus_b)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["reference_context"] = evaluator.REFERENCE_CONTEXT["description_stability"]
    payload["reference_note"] = evaluator.REFERENCE_CONTEXT["note"]
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    lines = ["metric,value"] + [f"{k},{v}" for k, v in report.to_dict().items()]
    (out / "report.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(
        f"stability over {report.count} pairs: cosine={report.mean_cosine:.4f} "
        f"jaccard={report.mean_jaccard:.4f} length={report.mean_length:.2f}±{report.std_length:.2f} -> {out}"
    )
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _Resolver(args)
    seed = cfg.get("seed", 1)
    err = trainer.run_gradcheck(seed, margin=cfg.get("margin", 1.0), loss_on=cfg.get("loss_on", "scores"))
    print(f"gradcheck seed={seed}: max relative error = {err:.3e} (tolerance 1e-4)")
    return 0 if err <= 1e-4 else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="georank", description="Cross-view retrieval and reranking pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help=f"key=value config file (default ${CONFIG_ENV})")
        return p

    p = add("synth", cmd_synth, "generate a deterministic synthetic store")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--locations", type=int)
    p.add_argument("--group-size", dest="group_size", type=int)
    p.add_argument("--image-dim", dest="image_dim", type=int)
    p.add_argument("--text-dim", dest="text_dim", type=int)
    p.add_argument("--image-noise", dest="image_noise", type=float)
    p.add_argument("--group-spread", dest="group_spread", type=float)
    p.add_argument("--text-margin", dest="text_margin", type=float)
    p.add_argument("--queries-per-location", dest="queries_per_location", type=int)
    p.add_argument("--semipositive-regime", dest="semipositive_regime", choices=("negative", "exclude"))

    p = add("ingest", cmd_ingest, "validate raw JSONL inputs and build a store")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--refs-emb", dest="refs_emb", required=True)
    p.add_argument("--refs-captions", dest="refs_captions")
    p.add_argument("--refs-coords", dest="refs_coords")
    p.add_argument("--refs-text-emb", dest="refs_text_emb")
    p.add_argument("--queries-emb", dest="queries_emb")
    p.add_argument("--queries-captions", dest="queries_captions")
    p.add_argument("--queries-coords", dest="queries_coords")
    p.add_argument("--queries-text-emb", dest="queries_text_emb")
    p.add_argument("--truth")

    p = add("retrieve", cmd_retrieve, "rank top-k references for every store query")
    p.add_argument("--store")
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--accum32", action="store_const", const=True, default=None,
                   help="accumulate cosine in float32 instead of float64")

    p = add("caption", cmd_caption, "validate answer sheets and render descriptions")
    p.add_argument("--sheets", required=True)
    p.add_argument("--bank", default=None, help="question bank JSON (default: packaged bank)")
    p.add_argument("--out", required=True)

    p = add("embed", cmd_embed, "embed descriptions via endpoint or offline mock")
    p.add_argument("--texts", required=True)
    p.add_argument("--out")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--text-dim", dest="text_dim", type=int)
    p.add_argument("--attach", help="store directory to attach embeddings to")
    p.add_argument("--side", choices=("refs", "queries"))

    p = add("build-samples", cmd_build_samples, "turn rankings into training samples")
    p.add_argument("--store")
    p.add_argument("--rankings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-semipositives", dest="exclude_semipositives", action="store_true")
    p.add_argument("--groups", help="groups.jsonl (default: <store>/groups.jsonl)")

    p = add("train", cmd_train, "train the reranking scorer")
    p.add_argument("--store")
    p.add_argument("--samples", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--shuffle-seed", dest="shuffle_seed", type=int)
    p.add_argument("--val-split", dest="val_split", type=float)
    p.add_argument("--loss-on", dest="loss_on", choices=("scores", "logits"))
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--aligner-layers", dest="aligner_layers", type=int)
    p.add_argument("--aligner-hidden", dest="aligner_hidden", type=int)
    p.add_argument("--ln-epsilon", dest="ln_epsilon", type=float)
    p.add_argument("--init-seed", dest="init_seed", type=int)
    p.add_argument("--shared-projections", dest="shared_projections", action="store_const", const=True, default=None)
    p.add_argument("--separate-projections", dest="shared_projections", action="store_const", const=False)

    p = add("rerank", cmd_rerank, "reorder rankings with a trained checkpoint")
    p.add_argument("--store")
    p.add_argument("--rankings", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "metrics for one ranking set")
    p.add_argument("--store")
    p.add_argument("--rankings", required=True)
    p.add_argument("--ks", type=_int_list)
    p.add_argument("--thresholds", type=_float_list)
    p.add_argument("--out", required=True)

    p = add("compare", cmd_compare, "baseline vs reranked comparison report")
    p.add_argument("--store")
    p.add_argument("--baseline", required=True)
    p.add_argument("--reranked", required=True)
    p.add_argument("--ks", type=_int_list)
    p.add_argument("--thresholds", type=_float_list)
    p.add_argument("--out", required=True)

    p = add("stability", cmd_stability, "description stability metrics between two runs")
    p.add_argument("--corpus-a", dest="corpus_a", required=True)
    p.add_argument("--corpus-b", dest="corpus_b", required=True)
    p.add_argument("--emb-a", dest="emb_a")
    p.add_argument("--emb-b", dest="emb_b")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--text-dim", dest="text_dim", type=int)
    p.add_argument("--out", required=True)

    p = add("gradcheck", cmd_gradcheck, "verify analytic gradients against finite differences")
    p.add_argument("--seed", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--loss-on", dest="loss_on", choices=("scores", "logits"))

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except (ValueError, KeyError, GeostoreError, cvlang.EmbedServiceError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
