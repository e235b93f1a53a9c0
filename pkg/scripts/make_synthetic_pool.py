#!/usr/bin/env python3
"""Generate a synthetic corpus with exactly known first-stage positions.

Candidate embeddings are unit vectors at strictly increasing angles from the
x-axis and every query embedding is the x-axis itself, so first-stage cosine
order equals ingestion order with no ties. Planting a query's ground truth at
first-stage position p therefore just means pointing it at candidate p-1.
That makes the corpus useful for exercising the whole pipeline end to end:
you know in advance where each target starts, so carry-forward behaviour and
metric values are predictable.

Each query's text carries a ``target=<candidate-id>`` marker and the matching
candidate's text contains that id, which is the convention the scripted
oracle policy keys on. Pass --image-every to give every k-th candidate a
small gradient PNG (modality text-image) so the image tools have something
to operate on.

Writes into --out:
    pool.jsonl, pool.vre, queries.jsonl, queries.vre,
    identity.json, oracle.json, config.json [, images/*.png]
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from evrank.store import EmbeddingMatrix, write_embeddings


def candidate_id(i: int) -> str:
    return f"cand-{i:03d}"


def angle_matrix(n: int, dim: int) -> EmbeddingMatrix:
    """Unit vectors whose cosine against (1, 0, ...) strictly decreases."""
    if dim < 2:
        raise ValueError("dim must be at least 2")
    angles = np.linspace(0.1, np.pi - 0.1, n)
    values = np.zeros((n, dim), dtype=np.float32)
    values[:, 0] = np.cos(angles)
    values[:, 1] = np.sin(angles)
    return EmbeddingMatrix(values=values)


def gradient_png(path: Path, size: int) -> None:
    img = Image.new("RGB", (size, size))
    img.putdata(
        [(x % 256, y % 256, 7) for y in range(size) for x in range(size)]
    )
    img.save(path, format="PNG")


def pick_positions(n_queries: int, k_top: int, rng: np.random.Generator) -> list[int]:
    """Distinct 1-based first-stage positions inside the rerank depth."""
    if n_queries > k_top:
        raise ValueError(
            f"cannot place {n_queries} distinct targets within k_top={k_top}"
        )
    chosen = rng.choice(np.arange(1, k_top + 1), size=n_queries, replace=False)
    return [int(p) for p in chosen]


def build_corpus(
    out: Path,
    n_candidates: int,
    positions: list[int],
    dim: int,
    k_top: int,
    window: int,
    stride: int,
    image_every: int = 0,
    image_size: int = 48,
) -> dict:
    """Write the corpus files and return the config dict that ties them up."""
    if n_candidates < k_top:
        raise ValueError(
            f"need at least k_top={k_top} candidates, got {n_candidates}"
        )
    bad = [p for p in positions if not 1 <= p <= k_top]
    if bad:
        raise ValueError(f"positions outside [1, k_top={k_top}]: {bad}")

    out.mkdir(parents=True, exist_ok=True)
    images_dir = out / "images"
    if image_every:
        images_dir.mkdir(exist_ok=True)

    pool_manifest = out / "pool.jsonl"
    with open(pool_manifest, "w", encoding="utf-8") as f:
        for i in range(n_candidates):
            cid = candidate_id(i)
            record = {
                "id": cid,
                "modality": "text",
                "text": f"synthetic item {cid}",
                "embedding_row": i,
            }
            if image_every and i % image_every == 0:
                ref = images_dir / f"{cid}.png"
                gradient_png(ref, image_size)
                record["modality"] = "text-image"
                record["image_ref"] = str(ref)
            f.write(json.dumps(record) + "\n")

    pool_embeddings = out / "pool.vre"
    with open(pool_embeddings, "wb") as f:
        write_embeddings(angle_matrix(n_candidates, dim), f)

    query_manifest = out / "queries.jsonl"
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
    query_embeddings = out / "queries.vre"
    with open(query_embeddings, "wb") as f:
        write_embeddings(EmbeddingMatrix(values=query_values), f)

    identity_policy = out / "identity.json"
    identity_policy.write_text(json.dumps({"type": "identity"}), "utf-8")
    oracle_policy = out / "oracle.json"
    oracle_policy.write_text(json.dumps({"type": "oracle"}), "utf-8")

    # One trajectory per window per query, so the natural advantage-group
    # size is the window count of the sliding plan.
    if k_top <= window:
        windows_per_query = 1
    else:
        windows_per_query = 1 + math.ceil((k_top - window) / stride)

    config = {
        "pool_manifest": str(pool_manifest),
        "pool_embeddings": str(pool_embeddings),
        "query_manifest": str(query_manifest),
        "query_embeddings": str(query_embeddings),
        "policy": {"kind": "scripted", "path": str(oracle_policy)},
        "rerank": {"k_top": k_top, "window": window, "stride": stride},
        "eapo": {"group_size": windows_per_query},
        "output_dir": str(out / "out"),
    }
    config_path = out / "config.json"
    config_path.write_text(json.dumps(config, indent=2) + "\n", "utf-8")
    return config


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, type=Path, help="output directory")
    parser.add_argument("--candidates", type=int, default=64)
    parser.add_argument("--queries", type=int, default=8)
    parser.add_argument("--dim", type=int, default=8, help="embedding width")
    parser.add_argument("--k-top", type=int, default=20, dest="k_top")
    parser.add_argument("--window", type=int, default=8)
    parser.add_argument("--stride", type=int, default=4)
    parser.add_argument(
        "--positions",
        help="comma-separated 1-based first-stage positions of the targets "
        "(one per query; default: sampled with --seed)",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--image-every",
        type=int,
        default=0,
        help="give every k-th candidate a gradient PNG (0 = text only)",
    )
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    if args.positions:
        positions = [int(p) for p in args.positions.split(",")]
        if len(positions) != args.queries:
            print(
                f"--positions lists {len(positions)} entries for "
                f"{args.queries} queries",
                file=sys.stderr,
            )
            return 2
    else:
        rng = np.random.default_rng(args.seed)
        positions = pick_positions(args.queries, args.k_top, rng)
    try:
        config = build_corpus(
            out=args.out,
            n_candidates=args.candidates,
            positions=positions,
            dim=args.dim,
            k_top=args.k_top,
            window=args.window,
            stride=args.stride,
            image_every=args.image_every,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote corpus to {args.out}")
    print(f"  {args.candidates} candidates, {len(positions)} queries, dim {args.dim}")
    print(f"  target first-stage positions: {positions}")
    print(f"  config: {args.out / 'config.json'}")
    print(f"  rerank: k_top={config['rerank']['k_top']} "
          f"window={config['rerank']['window']} stride={config['rerank']['stride']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
