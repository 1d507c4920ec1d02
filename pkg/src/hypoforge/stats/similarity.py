"""Embedding similarity between generated and held-out hypotheses, with a null distribution."""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import InputError, TransportError


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InputError(f"vectors must be 1-d with equal length, got {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InputError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _similarity_matrix(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    nx = np.linalg.norm(X, axis=1)
    ny = np.linalg.norm(Y, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise InputError("an embedding is the zero vector")
    return np.clip((X / nx[:, None]) @ (Y / ny[:, None]).T, -1.0, 1.0)


@dataclass(frozen=True)
class SimilarityEval:
    matched: np.ndarray
    null: np.ndarray
    matched_median: float
    null_median: float

    def rows(self) -> list[tuple[str, float]]:
        return [("matched", float(s)) for s in self.matched] + [("null", float(s)) for s in self.null]

    def write_csv(self, dest: str | Path | io.TextIOBase) -> None:
        fh = open(dest, "w", newline="", encoding="utf-8") if isinstance(dest, (str, Path)) else dest
        try:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("pair_type", "similarity"))
            for kind, s in self.rows():
                writer.writerow((kind, f"{s:.10g}"))
        finally:
            if fh is not dest:
                fh.close()


def temporal_similarity_eval(
    generated: Sequence[str],
    gold: Sequence[str],
    pairing: Sequence[tuple[int, int]] | None = None,
    embedder=None,
    *,
    backgrounds: Sequence[str] | None = None,
) -> SimilarityEval:
    """Similarity of each generated text to its gold counterpart, against a gold-vs-gold null.

    ``pairing`` lists (generated index, gold index) pairs and defaults to
    position. The null distribution holds similarities between gold texts
    whose ``backgrounds`` labels differ; without labels every gold pair is
    used.
    """
    if not gold:
        raise InputError("gold set is empty")
    if not generated:
        raise InputError("generated set is empty")
    if embedder is None:
        from ..kg import HashingEmbedder

        embedder = HashingEmbedder()
    if pairing is None:
        if len(generated) != len(gold):
            raise InputError("default pairing needs equal lengths")
        pairing = [(i, i) for i in range(len(gold))]
    if backgrounds is not None and len(backgrounds) != len(gold):
        raise InputError("one background label per gold text is required")
    try:
        G = np.asarray(embedder.embed(list(generated)), dtype=float)
        T = np.asarray(embedder.embed(list(gold)), dtype=float)
    except InputError:
        raise
    except Exception as exc:
        raise TransportError(f"embedder failed: {exc}") from exc
    cross = _similarity_matrix(G, T)
    matched = np.array([cross[i, j] for i, j in pairing])
    gg = _similarity_matrix(T, T)
    labels = backgrounds if backgrounds is not None else list(range(len(gold)))
    null = np.array([gg[i, j] for i, j in itertools.combinations(range(len(gold)), 2) if labels[i] != labels[j]])
    return SimilarityEval(
        matched,
        null,
        float(np.median(matched)),
        float(np.median(null)) if null.size else float("nan"),
    )


def read_text_pairs(source: str | Path | io.TextIOBase) -> tuple[list[str], list[str], list[str] | None]:
    """Read (generated, gold[, background]) columns."""
    fh = open(source, newline="", encoding="utf-8") if isinstance(source, (str, Path)) else source
    try:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or ()
        if "generated" not in cols or "gold" not in cols:
            raise InputError("row 1: need columns generated, gold")
        generated, gold, bgs = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not (row["generated"] or "").strip() or not (row["gold"] or "").strip():
                raise InputError(f"row {rowno}: empty text")
            generated.append(row["generated"])
            gold.append(row["gold"])
            bgs.append(row.get("background") or "")
    finally:
        if fh is not source:
            fh.close()
    return generated, gold, (bgs if "background" in cols else None)
