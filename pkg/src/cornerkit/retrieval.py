"""Latent-space corner retrieval and the raw-feature cosine baseline.

A corner's team embedding is the mean of that team's 11 rows of the
frame-averaged node matrix produced by a trained receiver model, so
embeddings inherit exact reflection invariance.  Retrieval is an exhaustive
Euclidean scan (corpora here are <= 1e4 corners); the cosine baseline ranks
flattened raw node features and is deliberately not reflection-invariant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import heads
from .cornergraph import ATTACKING, DEFENDING, CornerGraph
from .heads import Model

SIDES = (ATTACKING, DEFENDING, "both")


class RetrievalError(ValueError):
    """Invalid query, index, or side."""


@dataclass(frozen=True)
class TeamEmbedding:
    """Mean latent of one team's players for one corner."""

    corner_id: str
    side: str
    vector: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.vector).all():
            raise RetrievalError(f"embedding for {self.corner_id!r} is not finite")


def embed(corner: CornerGraph, receiver_model: Model, side=ATTACKING) -> TeamEmbedding:
    """Mean of the 11 side-team rows of the frame-averaged node matrix.

    side="both" concatenates the attacking and defending embeddings.
    """
    receiver_model.require_task(heads.RECEIVER)
    if side not in SIDES:
        raise RetrievalError(f"unknown side {side!r}")
    X, mask = heads._single_inputs(corner)
    bundle = heads.encode_batch(heads._views_for(receiver_model.encoder_cfg, X),
                                mask, None, receiver_model.params,
                                receiver_model.encoder_cfg)
    H = heads.node_latents(bundle, receiver_model.encoder_cfg.symmetry_mode).data[0]
    team = np.array([p.team == ATTACKING for p in corner.players])
    if side == "both":
        vector = np.concatenate([H[team].mean(axis=0), H[~team].mean(axis=0)])
    else:
        rows = team if side == ATTACKING else ~team
        vector = H[rows].mean(axis=0)
    return TeamEmbedding(corner_id=corner.id, side=side, vector=vector)


@dataclass
class EmbeddingIndex:
    """Flat exhaustive-scan index; ids unique per (corner, side)."""

    entries: list
    metric: str = "euclidean"

    def __post_init__(self):
        keys = [(e.corner_id, e.side) for e in self.entries]
        if len(set(keys)) != len(keys):
            raise RetrievalError("duplicate (corner id, side) in index")

    @classmethod
    def build(cls, corners, receiver_model: Model, side=ATTACKING):
        return cls(entries=[embed(c, receiver_model, side) for c in corners])

    def __len__(self):
        return len(self.entries)


def nearest(query: TeamEmbedding, index: EmbeddingIndex, k=1,
            exclude_self=True):
    """Ascending Euclidean distance; ties by ascending id.

    Returns (results, truncated): `results` are (corner_id, distance) pairs;
    `truncated` flags k exceeding the scannable index size.
    """
    if len(index) == 0:
        raise RetrievalError("index is empty")
    if k < 1:
        raise RetrievalError(f"k must be >= 1, got {k}")
    candidates = []
    for entry in index.entries:
        if exclude_self and entry.corner_id == query.corner_id:
            continue
        d = float(np.linalg.norm(entry.vector - query.vector))
        candidates.append((entry.corner_id, d))
    candidates.sort(key=lambda t: (t[1], t[0]))
    truncated = k > len(candidates)
    return candidates[:k], truncated


def rank_by_cosine(query_vector, vectors, ids, k):
    """Descending cosine similarity (ties by ascending id); scale-invariant.

    Returns (results, excluded_ids); zero-norm vectors are excluded.
    """
    q = np.asarray(query_vector, dtype=np.float64).reshape(-1)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise RetrievalError("query has a zero-norm feature vector")
    scored, excluded = [], []
    for vid, v in zip(ids, vectors):
        n = np.linalg.norm(v)
        if n == 0.0:
            excluded.append(vid)
            continue
        scored.append((vid, float(q @ v / (qn * n))))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k], excluded


def cosine_baseline(query: CornerGraph, corpus, k=1, exclude_self=True):
    """Rank corpus corners by cosine similarity of flattened raw features.

    Returns (results, excluded): `results` are (corner_id, similarity) pairs
    in descending similarity (ties by ascending id); `excluded` lists ids
    dropped for having zero-norm feature vectors.
    """
    if not corpus:
        raise RetrievalError("corpus is empty")
    pool = [c for c in corpus if not (exclude_self and c.id == query.id)]
    return rank_by_cosine(query.node_features().reshape(-1),
                          [c.node_features().reshape(-1) for c in pool],
                          [c.id for c in pool], k)


def export_embeddings(path, corners, receiver_model: Model, sides=(ATTACKING, DEFENDING)):
    """Line-delimited {id, side, vector} records for external tools."""
    with open(path, "w", encoding="utf-8") as fh:
        for corner in corners:
            for side in sides:
                e = embed(corner, receiver_model, side)
                fh.write(json.dumps({"id": e.corner_id, "side": e.side,
                                     "vector": [float(x) for x in e.vector]}) + "\n")
