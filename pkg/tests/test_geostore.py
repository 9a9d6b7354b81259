import json

import numpy as np
import pytest

from georank import geostore
from georank.evaluator import haversine
from georank.geostore import (
    EvalInstance,
    FormatError,
    GeoCoord,
    IngestError,
    Store,
    StoreManifest,
    SynthConfig,
    build_eval_instances,
    generate_synthetic,
    ingest,
    read_embedding_matrix,
    semipositive_map,
    store_digest,
    write_embedding_matrix,
)

from conftest import build_store, make_query, make_ref


# ---------------------------------------------------------------------------
# coordinates
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("lat,lon", [(90.5, 0), (-91, 0), (0, 180.2), (0, -181), (float("nan"), 0)])
def test_geocoord_rejects_out_of_range(lat, lon):
    with pytest.raises(ValueError):
        GeoCoord(lat, lon)


def test_geocoord_accepts_bounds():
    GeoCoord(90, 180)
    GeoCoord(-90, -180)


# ---------------------------------------------------------------------------
# embedding matrix format
# ---------------------------------------------------------------------------

def test_matrix_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(0)
    rows = rng.standard_normal((100, 17)).astype(np.float32)
    path = tmp_path / "m.emb"
    write_embedding_matrix(rows, path)
    back = read_embedding_matrix(path)
    assert back.dtype == np.float32
    assert np.array_equal(back, rows)


def test_matrix_empty_roundtrip(tmp_path):
    path = tmp_path / "m.emb"
    write_embedding_matrix(np.empty((0, 5), np.float32), path)
    back = read_embedding_matrix(path)
    assert back.shape == (0, 5)


def test_matrix_truncation_detected(tmp_path):
    path = tmp_path / "m.emb"
    write_embedding_matrix(np.ones((4, 3), np.float32), path)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(FormatError, match="truncated"):
        read_embedding_matrix(path)


def test_matrix_bad_magic(tmp_path):
    path = tmp_path / "m.emb"
    write_embedding_matrix(np.ones((2, 2), np.float32), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="magic"):
        read_embedding_matrix(path)


def test_matrix_version_mismatch(tmp_path):
    path = tmp_path / "m.emb"
    write_embedding_matrix(np.ones((2, 2), np.float32), path)
    data = bytearray(path.read_bytes())
    data[4] = 9
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="version"):
        read_embedding_matrix(path)


def test_matrix_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "m.emb"
    write_embedding_matrix(np.ones((2, 2), np.float32), path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        read_embedding_matrix(path)


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------

def _write_jsonl(path, records):
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _ref_file(tmp_path, rows, name="refs.jsonl"):
    path = tmp_path / name
    _write_jsonl(path, rows)
    return path


def test_ingest_three_refs_with_captions(tmp_path):
    emb = _ref_file(
        tmp_path,
        [{"id": f"a{i}", "embedding": [float(i + 1), 0.0, 0.0, 1.0]} for i in range(3)],
    )
    caps = tmp_path / "caps.jsonl"
    _write_jsonl(caps, [{"id": f"a{i}", "caption": f"scene {i}"} for i in range(3)])
    store = ingest(tmp_path / "store", StoreManifest(4, 3, 3, 0), emb, ref_captions=caps)
    assert len(store.ref_ids) == 3
    assert store.reference("a1").caption == "scene 1"


def test_ingest_dimension_mismatch_names_id(tmp_path):
    emb = _ref_file(tmp_path, [{"id": "good", "embedding": [1, 0, 0, 1]},
                               {"id": "bad5", "embedding": [1, 2, 3, 4, 5]}])
    with pytest.raises(IngestError, match="bad5") as exc:
        ingest(tmp_path / "store", StoreManifest(4, 3, 2, 0), emb)
    assert "5 values" in str(exc.value) and "line 2" in str(exc.value)


def test_ingest_duplicate_id(tmp_path):
    emb = _ref_file(tmp_path, [{"id": "dup", "embedding": [1, 0]}, {"id": "dup", "embedding": [0, 1]}])
    with pytest.raises(IngestError, match="duplicate"):
        ingest(tmp_path / "store", StoreManifest(2, 2, 2, 0), emb)


def test_ingest_malformed_row_names_file_and_line(tmp_path):
    path = tmp_path / "refs.jsonl"
    path.write_text('{"id": "ok", "embedding": [1, 0]}\nnot json\n')
    with pytest.raises(IngestError, match="line 2"):
        ingest(tmp_path / "store", StoreManifest(2, 2, 2, 0), path)


def test_ingest_rejects_nonfinite_and_zero_norm(tmp_path):
    emb = _ref_file(tmp_path, [{"id": "nan", "embedding": [1.0, float("nan")]}])
    with pytest.raises(IngestError, match="NaN"):
        ingest(tmp_path / "s1", StoreManifest(2, 2, 1, 0), emb)
    emb2 = _ref_file(tmp_path, [{"id": "zero", "embedding": [0.0, 0.0]}], name="refs2.jsonl")
    with pytest.raises(IngestError, match="zero-norm"):
        ingest(tmp_path / "s2", StoreManifest(2, 2, 1, 0), emb2)


def test_ingest_unresolvable_ground_truth(tmp_path):
    refs = _ref_file(tmp_path, [{"id": "r0", "embedding": [1, 0]}])
    qs = _ref_file(tmp_path, [{"id": "q0", "embedding": [1, 1]}], name="queries.jsonl")
    truth = tmp_path / "truth.jsonl"
    _write_jsonl(truth, [{"id": "q0", "refs": ["missing"]}])
    with pytest.raises(IngestError, match="unresolvable ground-truth id 'missing'"):
        ingest(tmp_path / "store", StoreManifest(2, 2, 1, 1), refs,
               query_embeddings=qs, query_truth=truth)


def test_ingest_count_mismatch(tmp_path):
    emb = _ref_file(tmp_path, [{"id": "a", "embedding": [1, 0]}])
    with pytest.raises(IngestError, match="manifest"):
        ingest(tmp_path / "store", StoreManifest(2, 2, 5, 0), emb)


def test_ingest_idempotent_digest(tmp_path):
    rng = np.random.default_rng(3)
    rows = [{"id": f"r{i}", "embedding": [float(x) for x in rng.standard_normal(4)]} for i in range(10)]
    emb = _ref_file(tmp_path, rows)
    coords = tmp_path / "coords.jsonl"
    _write_jsonl(coords, [{"id": f"r{i}", "lat": float(i), "lon": float(-i)} for i in range(10)])
    ingest(tmp_path / "s1", StoreManifest(4, 3, 10, 0), emb, ref_coords=coords)
    ingest(tmp_path / "s2", StoreManifest(4, 3, 10, 0), emb, ref_coords=coords)
    assert store_digest(tmp_path / "s1") == store_digest(tmp_path / "s2")


def test_ingest_bad_coordinate_names_id(tmp_path):
    emb = _ref_file(tmp_path, [{"id": "r0", "embedding": [1, 0]}])
    coords = tmp_path / "coords.jsonl"
    _write_jsonl(coords, [{"id": "r0", "lat": 95.0, "lon": 0.0}])
    with pytest.raises(IngestError, match="r0"):
        ingest(tmp_path / "store", StoreManifest(2, 2, 1, 0), emb, ref_coords=coords)


# ---------------------------------------------------------------------------
# store persistence
# ---------------------------------------------------------------------------

def test_store_roundtrip_preserves_all_fields(tmp_path):
    rng = np.random.default_rng(9)
    refs = [
        make_ref("r0", rng.standard_normal(4), text=rng.standard_normal(3),
                 caption="a road", coord=GeoCoord(1.5, -2.5)),
        make_ref("r1", rng.standard_normal(4)),
    ]
    queries = [make_query("q0", rng.standard_normal(4), ["r0"],
                          text=rng.standard_normal(3), coord=GeoCoord(0.25, 0.75))]
    store = build_store(refs, queries, image_dim=4, text_dim=3)
    store.save(tmp_path / "s")
    back = Store.load(tmp_path / "s")

    r0 = back.reference("r0")
    assert np.array_equal(r0.image_emb, refs[0].image_emb)
    assert np.array_equal(r0.text_emb, refs[0].text_emb)
    assert r0.caption == "a road"
    assert r0.coord == GeoCoord(1.5, -2.5)
    assert back.reference("r1").text_emb is None
    q0 = back.query("q0")
    assert q0.ground_truth == ("r0",)
    assert np.array_equal(q0.image_emb, queries[0].image_emb)
    assert q0.coord == GeoCoord(0.25, 0.75)
    # save again: byte-identical
    back.save(tmp_path / "s2")
    assert store_digest(tmp_path / "s") == store_digest(tmp_path / "s2")


# ---------------------------------------------------------------------------
# eval instances
# ---------------------------------------------------------------------------

def test_eval_instances_one_per_positive():
    refs = [make_ref(f"r{i}", [1.0, float(i)]) for i in range(6)]
    q = make_query("q", [1.0, 0.0], ["r1", "r3", "r5"])
    store = build_store(refs, [q], image_dim=2)
    instances = build_eval_instances(q, store)
    assert len(instances) == 3
    assert {i.positive_id for i in instances} == {"r1", "r3", "r5"}
    for inst in instances:
        assert inst.positive_id in inst.candidate_pool
        others = {"r1", "r3", "r5"} - {inst.positive_id}
        assert not (others & inst.candidate_pool)


def test_eval_instances_pool_arithmetic():
    refs = [make_ref(f"r{i:02d}", [1.0, float(i)]) for i in range(50)]
    q = make_query("q", [1.0, 0.0], ["r01", "r02", "r03"])
    store = build_store(refs, [q], image_dim=2)
    for inst in build_eval_instances(q, store):
        assert len(inst.candidate_pool) == 48


def test_eval_instances_single_positive_degenerate():
    refs = [make_ref("r0", [1.0, 0.0]), make_ref("r1", [0.0, 1.0])]
    q = make_query("q", [1.0, 0.0], ["r0"])
    store = build_store(refs, [q], image_dim=2)
    (inst,) = build_eval_instances(q, store)
    assert inst == EvalInstance("q", frozenset({"r0", "r1"}), "r0")


def test_eval_instances_empty_truth_rejected():
    refs = [make_ref("r0", [1.0, 0.0])]
    q = make_query("q", [1.0, 0.0], [])
    store = build_store(refs, [q], image_dim=2)
    with pytest.raises(ValueError, match="empty ground-truth"):
        build_eval_instances(q, store)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

def test_synthetic_deterministic_digest(tmp_path):
    cfg = SynthConfig(n_locations=40, group_size=4, image_dim=8, text_dim=8)
    for name in ("a", "b"):
        store, groups = generate_synthetic(cfg, seed=7)
        store.save(tmp_path / name)
        geostore.save_groups(groups, tmp_path / name / geostore.GROUPS_FILE)
    assert store_digest(tmp_path / "a") == store_digest(tmp_path / "b")
    store_c, _ = generate_synthetic(cfg, seed=8)
    store_c.save(tmp_path / "c")
    assert store_digest(tmp_path / "a") != store_digest(tmp_path / "c")


def test_synthetic_config_validation():
    with pytest.raises(ValueError, match="group_size"):
        generate_synthetic(SynthConfig(n_locations=3, group_size=4), 0)
    with pytest.raises(ValueError, match="dims"):
        generate_synthetic(SynthConfig(n_locations=8, group_size=2, image_dim=0), 0)


def test_synthetic_coordinates_grouped():
    cfg = SynthConfig(n_locations=64, group_size=4, image_dim=8, text_dim=8)
    store, groups = generate_synthetic(cfg, seed=1)
    by_group = {}
    for rid in store.ref_ids:
        by_group.setdefault(groups[rid], []).append(rid)
    gids = sorted(by_group)
    for g in gids:
        members = by_group[g]
        for a in members:
            for b in members:
                assert haversine(store.coord_of(a), store.coord_of(b)) < 0.5
    for ga, gb in zip(gids, gids[1:]):
        d = haversine(store.coord_of(by_group[ga][0]), store.coord_of(by_group[gb][0]))
        assert d > 5.0


def test_synthetic_chance_level_when_noise_dominates():
    from georank.retriever import rank_store_queries

    cfg = SynthConfig(n_locations=1000, group_size=4, image_dim=64, text_dim=16,
                      image_noise=0.6, group_spread=0.02, text_margin=0.95)
    store, _ = generate_synthetic(cfg, seed=3)
    rankings = rank_store_queries(store, 1)
    r1 = sum(r.entries[0][0] in store.ground_truth[r.query_id] for r in rankings) / len(rankings)
    assert 0.19 <= r1 <= 0.32  # chance level 1/g = 0.25


def test_synthetic_text_nearest_centroid_accuracy():
    cfg = SynthConfig(n_locations=500, group_size=4, image_dim=16, text_dim=64, text_margin=0.95)
    store, _ = generate_synthetic(cfg, seed=5)
    ref_txt = np.stack([store.ref_text_emb(r) for r in store.ref_ids])
    ref_txt = ref_txt / np.linalg.norm(ref_txt, axis=1, keepdims=True)
    hits = 0
    for qid in store.query_ids:
        q = store.query(qid).text_emb
        scores = ref_txt @ (q / np.linalg.norm(q))
        hits += store.ref_ids[int(np.argmax(scores))] in store.ground_truth[qid]
    assert hits / len(store.query_ids) >= 0.99


def test_semipositive_map_covers_group_mates():
    cfg = SynthConfig(n_locations=12, group_size=3, image_dim=8, text_dim=8)
    store, groups = generate_synthetic(cfg, seed=2)
    semi = semipositive_map(groups, store)
    for qid, drop in semi.items():
        (pos,) = store.ground_truth[qid]
        assert pos not in drop
        assert len(drop) == 2  # group of 3 minus the positive
        for rid in drop:
            assert groups[rid] == groups[qid]


def test_groups_roundtrip(tmp_path):
    cfg = SynthConfig(n_locations=8, group_size=2, image_dim=4, text_dim=4)
    _, groups = generate_synthetic(cfg, seed=0)
    geostore.save_groups(groups, tmp_path / "g.jsonl")
    assert geostore.load_groups(tmp_path / "g.jsonl") == groups


def test_ingest_full_dual_side_store(tmp_path):
    rng = np.random.default_rng(17)
    refs = [{"id": f"r{i}", "embedding": [float(x) for x in rng.standard_normal(4)]} for i in range(5)]
    ref_txt = [{"id": f"r{i}", "embedding": [float(x) for x in rng.standard_normal(3)]} for i in range(5)]
    qs = [{"id": f"q{i}", "embedding": [float(x) for x in rng.standard_normal(4)]} for i in range(2)]
    q_txt = [{"id": f"q{i}", "embedding": [float(x) for x in rng.standard_normal(3)]} for i in range(2)]
    truth = [{"id": f"q{i}", "refs": [f"r{i}", f"r{i+1}"]} for i in range(2)]
    paths = {}
    for name, rows in (("refs", refs), ("ref_txt", ref_txt), ("qs", qs), ("q_txt", q_txt), ("truth", truth)):
        paths[name] = tmp_path / f"{name}.jsonl"
        _write_jsonl(paths[name], rows)
    store = ingest(
        tmp_path / "store",
        StoreManifest(4, 3, 5, 2),
        paths["refs"],
        ref_text_embeddings=paths["ref_txt"],
        query_embeddings=paths["qs"],
        query_text_embeddings=paths["q_txt"],
        query_truth=paths["truth"],
    )
    back = Store.load(tmp_path / "store")
    assert back.ground_truth["q1"] == ("r1", "r2")
    for i in range(5):
        assert back.ref_text_emb(f"r{i}") is not None
    for i in range(2):
        assert back.query_text_emb(f"q{i}") is not None
    assert store_digest(tmp_path / "store") == store_digest(tmp_path / "store")


def test_write_matrix_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError, match="2-D"):
        write_embedding_matrix(np.ones(5, np.float32), tmp_path / "m.emb")


def test_ingest_text_dim_mismatch_names_id(tmp_path):
    emb = _ref_file(tmp_path, [{"id": "r0", "embedding": [1.0, 0.0]}])
    txt = tmp_path / "txt.jsonl"
    _write_jsonl(txt, [{"id": "r0", "embedding": [1.0, 2.0, 3.0, 4.0]}])
    with pytest.raises(IngestError, match="r0"):
        ingest(tmp_path / "store", StoreManifest(2, 3, 1, 0), emb, ref_text_embeddings=txt)
