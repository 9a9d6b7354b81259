import json
from pathlib import Path

import numpy as np
import pytest

from georank.cli import build_parser, main
from georank.geostore import Store, store_digest
from georank.retriever import load_rankings

GOLDEN = Path(__file__).parent / "golden"

SUBCOMMANDS = [
    "synth", "ingest", "retrieve", "caption", "embed", "build-samples",
    "train", "rerank", "eval", "compare", "stability", "gradcheck",
]


def synth_args(out, locations=12, group_size=3, seed=0):
    return [
        "synth", "--out", str(out), "--locations", str(locations), "--group-size", str(group_size),
        "--image-dim", "8", "--text-dim", "8", "--seed", str(seed),
    ]


@pytest.fixture
def mini_store(tmp_path):
    out = tmp_path / "store"
    assert main(synth_args(out)) == 0
    return out


# ---------------------------------------------------------------------------
# usage and exit codes
# ---------------------------------------------------------------------------

def test_help_on_every_subcommand(capsys):
    for name in SUBCOMMANDS:
        assert main([name, "--help"]) == 0
        assert "usage" in capsys.readouterr().out


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_exits_1(capsys):
    assert main(["gradcheck", "--frob", "1"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_input_file_exits_2(tmp_path, capsys):
    assert main(["retrieve", "--store", str(tmp_path / "nope"), "--out", str(tmp_path / "r.jsonl")]) == 2
    assert "io error" in capsys.readouterr().err


def test_validation_error_exits_1(tmp_path, mini_store, capsys):
    bad = tmp_path / "rankings.jsonl"
    bad.write_text('{"query_id": "ghost", "entries": [["r00", 1.0]]}\n')
    assert main(["eval", "--store", str(mini_store), "--rankings", str(bad), "--out", str(tmp_path / "out")]) == 1
    assert "ghost" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# config precedence
# ---------------------------------------------------------------------------

def test_config_precedence_flag_beats_file_beats_default(tmp_path, mini_store, monkeypatch):
    out = tmp_path / "r.jsonl"
    # built-in default: k=10
    assert main(["retrieve", "--store", str(mini_store), "--out", str(out)]) == 0
    assert len(load_rankings(out)[0].entries) == 10

    cfg = tmp_path / "georank.cfg"
    cfg.write_text("k=7\n")
    monkeypatch.setenv("GEOVLM_CONFIG", str(cfg))
    assert main(["retrieve", "--store", str(mini_store), "--out", str(out)]) == 0
    assert len(load_rankings(out)[0].entries) == 7

    assert main(["retrieve", "--store", str(mini_store), "--out", str(out), "--k", "5"]) == 0
    assert len(load_rankings(out)[0].entries) == 5


def test_config_file_flag_overrides_env(tmp_path, mini_store, monkeypatch):
    env_cfg = tmp_path / "env.cfg"
    env_cfg.write_text("k=7\n")
    flag_cfg = tmp_path / "flag.cfg"
    flag_cfg.write_text("k=3\n")
    monkeypatch.setenv("GEOVLM_CONFIG", str(env_cfg))
    out = tmp_path / "r.jsonl"
    assert main(["retrieve", "--config", str(flag_cfg), "--store", str(mini_store), "--out", str(out)]) == 0
    assert len(load_rankings(out)[0].entries) == 3


def test_unknown_config_key_rejected(tmp_path, mini_store, capsys):
    cfg = tmp_path / "georank.cfg"
    cfg.write_text("k=7\nwibble=3\n")
    out = tmp_path / "r.jsonl"
    assert main(["retrieve", "--config", str(cfg), "--store", str(mini_store), "--out", str(out)]) == 1
    assert "wibble" in capsys.readouterr().err


def test_store_setting_from_config_file(tmp_path, mini_store):
    cfg = tmp_path / "georank.cfg"
    cfg.write_text(f"store={mini_store}\n")
    out = tmp_path / "r.jsonl"
    assert main(["retrieve", "--config", str(cfg), "--out", str(out)]) == 0


def test_missing_store_setting_is_validation_error(tmp_path, capsys):
    assert main(["retrieve", "--out", str(tmp_path / "r.jsonl")]) == 1
    assert "store" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# pipeline pieces
# ---------------------------------------------------------------------------

def test_synth_deterministic_across_runs(tmp_path):
    assert main(synth_args(tmp_path / "a", seed=3)) == 0
    assert main(synth_args(tmp_path / "b", seed=3)) == 0
    assert store_digest(tmp_path / "a") == store_digest(tmp_path / "b")


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out


def test_ingest_cli_roundtrip(tmp_path):
    refs = tmp_path / "refs.jsonl"
    with open(refs, "w") as fh:
        for i in range(3):
            fh.write(json.dumps({"id": f"a{i}", "embedding": [float(i + 1), 0.5]}) + "\n")
    manifest = tmp_path / "manifest.txt"
    manifest.write_text("format_version=1\nimage_dim=2\ntext_dim=4\nreference_count=3\nquery_count=0\n")
    out = tmp_path / "store"
    assert main(["ingest", "--out", str(out), "--manifest", str(manifest), "--refs-emb", str(refs)]) == 0
    store = Store.load(out)
    assert store.ref_ids == ["a0", "a1", "a2"]


def test_caption_and_embed_attach_flow(tmp_path, mini_store):
    store = Store.load(mini_store)
    base = json.loads((GOLDEN / "sheet_first_options.json").read_text())
    sheets = tmp_path / "sheets.jsonl"
    with open(sheets, "w") as fh:
        for rid in store.ref_ids[:3]:
            fh.write(json.dumps({"image_id": rid, "answers": base["answers"]}) + "\n")
    descs = tmp_path / "descs.jsonl"
    assert main(["caption", "--sheets", str(sheets), "--out", str(descs)]) == 0
    assert len(descs.read_text().splitlines()) == 3

    emb = tmp_path / "emb.jsonl"
    assert main(["embed", "--texts", str(descs), "--out", str(emb), "--text-dim", "8",
                 "--attach", str(mini_store), "--side", "refs"]) == 0
    rows = [json.loads(line) for line in emb.read_text().splitlines()]
    assert len(rows) == 3 and len(rows[0]["embedding"]) == 8
    reloaded = Store.load(mini_store)
    # identical sheets embed to identical vectors
    a = reloaded.ref_text_emb(store.ref_ids[0])
    b = reloaded.ref_text_emb(store.ref_ids[1])
    assert a is not None and np.array_equal(a, b)


def test_caption_invalid_sheet_exits_1(tmp_path, capsys):
    base = json.loads((GOLDEN / "sheet_first_options.json").read_text())
    answers = dict(base["answers"])
    answers["Q2"] = "spaghetti junction"
    sheets = tmp_path / "sheets.jsonl"
    sheets.write_text(json.dumps({"image_id": "img9", "answers": answers}) + "\n")
    assert main(["caption", "--sheets", str(sheets), "--out", str(tmp_path / "d.jsonl")]) == 1
    err = capsys.readouterr().err
    assert "img9" in err and "Q2" in err


def test_embed_dim_mismatch_on_attach_exits_1(tmp_path, mini_store, capsys):
    texts = tmp_path / "texts.jsonl"
    texts.write_text(json.dumps({"id": "r00", "text": "hello"}) + "\n")
    assert main(["embed", "--texts", str(texts), "--text-dim", "16", "--attach", str(mini_store)]) == 1
    assert "text_dim" in capsys.readouterr().err


def test_stability_cli(tmp_path):
    corpus_a = tmp_path / "a.jsonl"
    corpus_b = tmp_path / "b.jsonl"
    for path, suffix in ((corpus_a, ""), (corpus_b, " extra")):
        with open(path, "w") as fh:
            for i in range(4):
                fh.write(json.dumps({"id": f"i{i}", "description": f"scene {i}{suffix}"}) + "\n")
    out = tmp_path / "stab"
    assert main(["stability", "--corpus-a", str(corpus_a), "--corpus-b", str(corpus_b),
                 "--text-dim", "32", "--out", str(out)]) == 0
    payload = json.loads((out / "report.json").read_text())
    assert 0.0 <= payload["mean_jaccard"] <= 1.0
    assert payload["count"] == 4
    assert payload["reference_context"]["cosine"] == 0.83


def test_semipositive_exclusion_pipeline(tmp_path):
    store_dir = tmp_path / "store"
    assert main(synth_args(store_dir, locations=12, group_size=3) + ["--semipositive-regime", "exclude"]) == 0
    rankings = tmp_path / "rankings.jsonl"
    assert main(["retrieve", "--store", str(store_dir), "--k", "6", "--out", str(rankings)]) == 0
    samples = tmp_path / "samples.jsonl"
    assert main(["build-samples", "--store", str(store_dir), "--rankings", str(rankings),
                 "--out", str(samples), "--exclude-semipositives"]) == 0
    from georank.trainer import load_samples
    from georank.geostore import load_groups

    groups = load_groups(store_dir / "groups.jsonl")
    for s in load_samples(samples):
        gq = groups[s.query_id]
        for i, rid in enumerate(s.candidate_ids):
            if i != s.positive_index:
                assert groups[rid] != gq  # same-group mates were excluded


# ---------------------------------------------------------------------------
# end-to-end mini pipeline
# ---------------------------------------------------------------------------

def test_end_to_end_pipeline(tmp_path):
    store_dir = tmp_path / "store"
    assert main(synth_args(store_dir, locations=24, group_size=4, seed=1)) == 0
    baseline = tmp_path / "baseline.jsonl"
    assert main(["retrieve", "--store", str(store_dir), "--k", "10", "--out", str(baseline)]) == 0
    samples = tmp_path / "samples.jsonl"
    assert main(["build-samples", "--store", str(store_dir), "--rankings", str(baseline),
                 "--out", str(samples)]) == 0
    train_dir = tmp_path / "train"
    assert main(["train", "--store", str(store_dir), "--samples", str(samples), "--out", str(train_dir),
                 "--epochs", "2", "--lr", "0.003", "--batch-size", "8",
                 "--latent-dim", "8", "--aligner-hidden", "8"]) == 0
    assert (train_dir / "final.gvck").exists()
    assert (train_dir / "train_report.csv").exists()
    reranked = tmp_path / "reranked.jsonl"
    assert main(["rerank", "--store", str(store_dir), "--rankings", str(baseline),
                 "--checkpoint", str(train_dir / "final.gvck"), "--out", str(reranked)]) == 0

    compare_dir = tmp_path / "compare"
    assert main(["compare", "--store", str(store_dir), "--baseline", str(baseline),
                 "--reranked", str(reranked), "--out", str(compare_dir)]) == 0
    payload = json.loads((compare_dir / "report.json").read_text())
    assert payload["recall"]["10"]["delta"] == 0.0
    for name in ("report.json", "report.csv", "report.svg"):
        assert (compare_dir / name).exists()

    eval_dir = tmp_path / "eval"
    assert main(["eval", "--store", str(store_dir), "--rankings", str(baseline), "--out", str(eval_dir)]) == 0
    metrics = json.loads((eval_dir / "report.json").read_text())
    assert 0.0 <= metrics["recall"]["1"] <= 1.0
    assert "threshold_recall" in metrics  # synthetic stores carry coordinates


def test_parser_builds():
    parser = build_parser()
    assert parser.prog == "georank"


def test_ingested_store_pipeline(tmp_path):
    # ingest raw JSONL (not synth), then retrieve/rerank over it
    rng = np.random.default_rng(31)
    n_refs, dim, tdim = 8, 4, 3
    with open(tmp_path / "refs.jsonl", "w") as fh:
        for i in range(n_refs):
            fh.write(json.dumps({"id": f"r{i}", "embedding": [float(x) for x in rng.standard_normal(dim)]}) + "\n")
    with open(tmp_path / "ref_txt.jsonl", "w") as fh:
        for i in range(n_refs):
            fh.write(json.dumps({"id": f"r{i}", "embedding": [float(x) for x in rng.standard_normal(tdim)]}) + "\n")
    with open(tmp_path / "qs.jsonl", "w") as fh:
        fh.write(json.dumps({"id": "q0", "embedding": [float(x) for x in rng.standard_normal(dim)]}) + "\n")
    with open(tmp_path / "q_txt.jsonl", "w") as fh:
        fh.write(json.dumps({"id": "q0", "embedding": [float(x) for x in rng.standard_normal(tdim)]}) + "\n")
    with open(tmp_path / "truth.jsonl", "w") as fh:
        fh.write(json.dumps({"id": "q0", "refs": ["r3"]}) + "\n")
    manifest = tmp_path / "manifest.txt"
    manifest.write_text(
        f"format_version=1\nimage_dim={dim}\ntext_dim={tdim}\nreference_count={n_refs}\nquery_count=1\n"
    )
    store = tmp_path / "store"
    assert main(["ingest", "--out", str(store), "--manifest", str(manifest),
                 "--refs-emb", str(tmp_path / "refs.jsonl"),
                 "--refs-text-emb", str(tmp_path / "ref_txt.jsonl"),
                 "--queries-emb", str(tmp_path / "qs.jsonl"),
                 "--queries-text-emb", str(tmp_path / "q_txt.jsonl"),
                 "--truth", str(tmp_path / "truth.jsonl")]) == 0
    rankings = tmp_path / "rankings.jsonl"
    assert main(["retrieve", "--store", str(store), "--k", "5", "--out", str(rankings)]) == 0
    samples = tmp_path / "samples.jsonl"
    assert main(["build-samples", "--store", str(store), "--rankings", str(rankings), "--out", str(samples)]) == 0
    train_dir = tmp_path / "train"
    assert main(["train", "--store", str(store), "--samples", str(samples), "--out", str(train_dir),
                 "--epochs", "1", "--latent-dim", "4", "--aligner-hidden", "4", "--val-split", "0"]) == 0
    reranked = tmp_path / "reranked.jsonl"
    assert main(["rerank", "--store", str(store), "--rankings", str(rankings),
                 "--checkpoint", str(train_dir / "final.gvck"), "--out", str(reranked)]) == 0
    out = load_rankings(reranked)
    assert sorted(out[0].ids()) == sorted(load_rankings(rankings)[0].ids())
