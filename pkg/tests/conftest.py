import numpy as np
import pytest

from georank.geostore import GeoCoord, QueryRecord, ReferenceRecord, Store, StoreManifest


def build_store(refs, queries, image_dim, text_dim=8):
    manifest = StoreManifest(image_dim, text_dim, len(refs), len(queries))
    return Store(manifest, refs, queries)


def make_ref(rid, image, text=None, caption=None, coord=None):
    return ReferenceRecord(
        id=rid,
        image_emb=np.asarray(image, np.float32),
        text_emb=None if text is None else np.asarray(text, np.float32),
        caption=caption,
        coord=coord,
    )


def make_query(qid, image, truth, text=None, coord=None):
    return QueryRecord(
        id=qid,
        image_emb=np.asarray(image, np.float32),
        ground_truth=tuple(truth),
        text_emb=None if text is None else np.asarray(text, np.float32),
        coord=coord,
    )


@pytest.fixture
def simple_store():
    """Three references with hand-checkable cosine order for query [1,0]."""
    refs = [
        make_ref("e1", [1.0, 0.0], text=[1.0, 0.0, 0.0]),
        make_ref("e2", [0.0, 1.0], text=[0.0, 1.0, 0.0]),
        make_ref("e3", [0.6, 0.8], text=[0.0, 0.0, 1.0]),
    ]
    queries = [make_query("q1", [1.0, 0.0], ["e1"], text=[1.0, 0.0, 0.0])]
    return build_store(refs, queries, image_dim=2, text_dim=3)


def random_store(rng, n_refs, n_queries, image_dim, text_dim=4, with_text=False, with_coords=False):
    refs = []
    for i in range(n_refs):
        refs.append(
            make_ref(
                f"r{i:05d}",
                rng.standard_normal(image_dim),
                text=rng.standard_normal(text_dim) if with_text else None,
                coord=GeoCoord(float(rng.uniform(-60, 60)), float(rng.uniform(-170, 170))) if with_coords else None,
            )
        )
    queries = []
    for i in range(n_queries):
        truth = [f"r{int(rng.integers(0, n_refs)):05d}"]
        queries.append(
            make_query(
                f"q{i:05d}",
                rng.standard_normal(image_dim),
                truth,
                text=rng.standard_normal(text_dim) if with_text else None,
            )
        )
    return build_store(refs, queries, image_dim, text_dim)
