"""Embedding extraction and rank-k retrieval evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NumericalError, UsageError
from .model import Model

Array = np.ndarray


@dataclass
class EmbeddingSet:
    matrix: Array
    identities: Array
    domains: list[str]
    normalized: bool = False


@dataclass
class CmcResult:
    """Rank-k accuracy curve; rank_accuracy[k-1] is the fraction of queries
    whose first correct gallery match sorts within the top k."""

    rank_accuracy: Array
    ranks: Array  # 1-based rank of first match per query; -1 when unmatched
    protocol: str
    n_query: int
    n_gallery: int
    n_unmatched: int = 0
    meta: dict = field(default_factory=dict)

    def rank(self, k: int) -> float:
        return float(self.rank_accuracy[k - 1])

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "K": len(self.rank_accuracy),
                "rank_accuracy": [float(v) for v in self.rank_accuracy],
                "n_query": self.n_query, "n_gallery": self.n_gallery,
                "n_unmatched": self.n_unmatched, **self.meta}


def l2_normalize(embeddings: Array) -> Array:
    """Row-wise unit L2 norm; rejects zero rows."""
    norms = np.sqrt((embeddings ** 2).sum(axis=1))
    if np.any(norms == 0):
        row = int(np.flatnonzero(norms == 0)[0])
        raise NumericalError(f"cannot L2-normalize zero embedding at row {row}")
    return embeddings / norms[:, None]


def normalize_set(es: EmbeddingSet) -> EmbeddingSet:
    return EmbeddingSet(l2_normalize(es.matrix), es.identities, es.domains, normalized=True)


def cmc(query: EmbeddingSet, gallery: EmbeddingSet, K: int | None = None,
        protocol: str = "") -> CmcResult:
    """Cumulative matching characteristic by ascending Euclidean distance.

    Ties break by gallery index (stable sort). Queries whose identity is
    absent from the gallery are excluded from the curve and counted in
    n_unmatched.
    """
    if len(query.matrix) == 0 or len(gallery.matrix) == 0:
        raise UsageError("cmc needs non-empty query and gallery sets")
    n_g = len(gallery.matrix)
    if K is None:
        K = n_g
    q2 = (query.matrix ** 2).sum(axis=1)[:, None]
    g2 = (gallery.matrix ** 2).sum(axis=1)[None, :]
    d2 = q2 + g2 - 2.0 * query.matrix @ gallery.matrix.T
    order = np.argsort(d2, axis=1, kind="stable")
    match = gallery.identities[order] == query.identities[:, None]
    ranks = np.full(len(query.matrix), -1, dtype=int)
    has_match = match.any(axis=1)
    ranks[has_match] = match[has_match].argmax(axis=1) + 1
    matched_ranks = ranks[has_match]
    n_eval = len(matched_ranks)
    curve = np.zeros(K)
    if n_eval:
        for k in range(1, K + 1):
            curve[k - 1] = (matched_ranks <= k).mean()
    return CmcResult(rank_accuracy=curve, ranks=ranks, protocol=protocol,
                     n_query=len(query.matrix), n_gallery=n_g,
                     n_unmatched=int((~has_match).sum()))


def extract_embeddings(model: Model, split, normalized: bool = True) -> dict[str, EmbeddingSet]:
    """One embedding pass over a split: photos through e1, sketches through e2
    (falling back to e1 when no sketch encoder exists)."""
    out = {}
    for domain, enc in (("t1", model.e1), ("t2", model.e2 or model.e1)):
        idx = split.indices_for(domain=domain)
        if not idx:
            continue
        emb, _ = enc.forward(split.images(idx), train=False)
        es = EmbeddingSet(emb, split.labels(idx), [domain] * len(idx))
        out[domain] = normalize_set(es) if normalized else es
    return out


def evaluate_bidirectional(model: Model, target_test, K: int | None = None) -> dict[str, CmcResult]:
    """CMC for sketch->photo and photo->sketch from one embedding pass."""
    if len(target_test) == 0:
        raise UsageError("empty evaluation split")
    sets = extract_embeddings(model, target_test, normalized=True)
    if "t1" not in sets or "t2" not in sets:
        raise UsageError("evaluation split must contain both photos and sketches")
    return {
        "sketch_to_photo": cmc(sets["t2"], sets["t1"], K, protocol="sketch_to_photo"),
        "photo_to_sketch": cmc(sets["t1"], sets["t2"], K, protocol="photo_to_sketch"),
    }


def export_embeddings(es: EmbeddingSet, path, attributes: Array | None = None) -> None:
    """Columnar text export: identity, domain, predicted attribute bits, and
    embedding values, one row per sample."""
    dim = es.matrix.shape[1]
    n_att = 0 if attributes is None else attributes.shape[1]
    header = ["identity", "domain"] + [f"att{i}" for i in range(n_att)] \
        + [f"e{i}" for i in range(dim)]
    lines = ["\t".join(header)]
    for i in range(len(es.matrix)):
        row = [str(int(es.identities[i])), es.domains[i]]
        if attributes is not None:
            row += [str(int(v)) for v in attributes[i]]
        row += [np.format_float_scientific(v, precision=17) for v in es.matrix[i]]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_embeddings(path) -> tuple[EmbeddingSet, Array | None]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    header = lines[0].split("\t")
    att_cols = [i for i, h in enumerate(header) if h.startswith("att")]
    emb_cols = [i for i, h in enumerate(header) if h.startswith("e") and h[1:].isdigit()]
    ids, doms, atts, embs = [], [], [], []
    for line in lines[1:]:
        parts = line.split("\t")
        ids.append(int(parts[0]))
        doms.append(parts[1])
        if att_cols:
            atts.append([int(parts[i]) for i in att_cols])
        embs.append([float(parts[i]) for i in emb_cols])
    es = EmbeddingSet(np.array(embs), np.array(ids), doms)
    return es, (np.array(atts) if att_cols else None)


def save_cmc(result: CmcResult, path, seed: int | None = None) -> None:
    payload = result.to_dict()
    if seed is not None:
        payload["seed"] = seed
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
