"""Shared builders for synthetic pools, queries, images, and turns."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from evrank.store import (
    Candidate,
    EmbeddingMatrix,
    Modality,
    Pool,
    Query,
    attach_query_embeddings,
    write_embeddings,
)


def candidate_id(i: int) -> str:
    return f"cand-{i:03d}"


def angle_matrix(n: int, dim: int = 2) -> EmbeddingMatrix:
    """Unit vectors at strictly increasing angles: cosine against (1, 0, ...)
    decreases with the row index, so first-stage order equals ingestion
    order with no ties."""
    assert dim >= 2
    angles = np.linspace(0.1, np.pi - 0.1, n)
    values = np.zeros((n, dim), dtype=np.float32)
    values[:, 0] = np.cos(angles)
    values[:, 1] = np.sin(angles)
    return EmbeddingMatrix(values=values)


def make_pool(n: int, dim: int = 2, image_refs: dict[int, str] | None = None) -> Pool:
    image_refs = image_refs or {}
    candidates = []
    for i in range(n):
        cid = candidate_id(i)
        if i in image_refs:
            candidates.append(
                Candidate(
                    id=cid,
                    modality=Modality.TEXT_IMAGE,
                    text=f"synthetic item {cid}",
                    image_ref=image_refs[i],
                    embedding_row=i,
                )
            )
        else:
            candidates.append(
                Candidate(
                    id=cid,
                    modality=Modality.TEXT,
                    text=f"synthetic item {cid}",
                    embedding_row=i,
                )
            )
    pool = Pool(candidates=candidates)
    pool.attach_embeddings(angle_matrix(n, dim))
    return pool


def make_target_query(pool: Pool, position: int, qid: str | None = None) -> Query:
    """A query whose ground truth sits at first-stage position ``position``
    (1-based), with a target marker the oracle backend can read."""
    gt = pool.candidates[position - 1].id
    dim = pool._aligned64.shape[1]
    embedding = np.zeros(dim, dtype=np.float32)
    embedding[0] = 1.0
    return Query(
        id=qid or f"query-{position:03d}",
        modality=Modality.TEXT,
        text=f"find target={gt} in the corpus",
        gt_candidate_ids=frozenset({gt}),
        embedding=embedding,
    )


def think_answer(order, note: str = "ranked") -> str:
    listed = ", ".join(str(v) for v in order)
    return f"<think>{note}</think><answer>{listed}</answer>"


def think_tool(body: dict, note: str = "inspecting") -> str:
    return f"<think>{note}</think><tool_call>{json.dumps(body)}</tool_call>"


def bare_pool(n: int) -> Pool:
    """Text-only pool with no embeddings, for window mechanics tests."""
    return Pool(
        candidates=[
            Candidate(
                id=candidate_id(i),
                modality=Modality.TEXT,
                text=f"synthetic item {candidate_id(i)}",
            )
            for i in range(n)
        ]
    )


def make_image_window(root: Path, n: int, size: int = 40) -> list[Candidate]:
    """Text-image candidates whose gradient files really exist on disk."""
    window = []
    for i in range(n):
        path = root / f"win-{i}.png"
        path.write_bytes(gradient_png(size, size))
        window.append(
            Candidate(
                id=f"img-{i}",
                modality=Modality.TEXT_IMAGE,
                text=f"pictured item {i}",
                image_ref=str(path),
            )
        )
    return window


def plain_query(qid: str = "q-ep", text: str = "find the pictured item") -> Query:
    return Query(id=qid, modality=Modality.TEXT, text=text)


def gradient_png(width: int, height: int) -> bytes:
    """Pixel (x, y) stores (x % 256, y % 256, 7), so crops are checkable."""
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    xs = np.arange(width, dtype=np.uint32) % 256
    ys = np.arange(height, dtype=np.uint32) % 256
    arr[:, :, 0] = xs[None, :]
    arr[:, :, 1] = ys[:, None]
    arr[:, :, 2] = 7
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def unique_pixel_png(width: int, height: int, px: int, py: int) -> bytes:
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    arr[py, px] = (255, 0, 0)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# On-disk corpus for CLI tests
# ---------------------------------------------------------------------------

def write_corpus(
    root: Path,
    n_candidates: int = 12,
    positions: tuple[int, ...] = (1, 4, 9),
    dim: int = 2,
) -> dict:
    """Write manifests, embeddings, scripted policies, and a config file.

    Query i's ground truth is planted at first-stage position positions[i].
    Returns the path map plus the config dict for editing.
    """
    root.mkdir(parents=True, exist_ok=True)
    pool_manifest = root / "pool.jsonl"
    with open(pool_manifest, "w", encoding="utf-8") as f:
        for i in range(n_candidates):
            cid = candidate_id(i)
            f.write(
                json.dumps(
                    {
                        "id": cid,
                        "modality": "text",
                        "text": f"synthetic item {cid}",
                        "embedding_row": i,
                    }
                )
                + "\n"
            )
    pool_embeddings = root / "pool.vre"
    with open(pool_embeddings, "wb") as f:
        write_embeddings(angle_matrix(n_candidates, dim), f)

    query_manifest = root / "queries.jsonl"
    with open(query_manifest, "w", encoding="utf-8") as f:
        for i, pos in enumerate(positions):
            gt = candidate_id(pos - 1)
            f.write(
                json.dumps(
                    {
                        "id": f"query-{i:03d}",
                        "modality": "text",
                        "text": f"find target={gt} in the corpus",
                        "gt_candidate_ids": [gt],
                        "embedding_row": i,
                    }
                )
                + "\n"
            )
    query_values = np.zeros((len(positions), dim), dtype=np.float32)
    query_values[:, 0] = 1.0
    query_embeddings = root / "queries.vre"
    with open(query_embeddings, "wb") as f:
        write_embeddings(EmbeddingMatrix(values=query_values), f)

    identity_policy = root / "identity.json"
    identity_policy.write_text(json.dumps({"type": "identity"}), "utf-8")
    oracle_policy = root / "oracle.json"
    oracle_policy.write_text(json.dumps({"type": "oracle"}), "utf-8")

    config = {
        "pool_manifest": str(pool_manifest),
        "pool_embeddings": str(pool_embeddings),
        "query_manifest": str(query_manifest),
        "query_embeddings": str(query_embeddings),
        "policy": {"kind": "scripted", "path": str(identity_policy)},
        "rerank": {"k_top": 10, "window": 5, "stride": 3},
        "output_dir": str(root / "out"),
    }
    config_path = root / "config.json"
    config_path.write_text(json.dumps(config, indent=2), "utf-8")
    return {
        "root": root,
        "config": config,
        "config_path": config_path,
        "pool_manifest": pool_manifest,
        "pool_embeddings": pool_embeddings,
        "query_manifest": query_manifest,
        "query_embeddings": query_embeddings,
        "identity_policy": identity_policy,
        "oracle_policy": oracle_policy,
    }


@pytest.fixture
def corpus(tmp_path):
    return write_corpus(tmp_path / "corpus")
