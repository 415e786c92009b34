"""Per-item semantic embeddings and their PCA reduction.

Embeddings come either from a TSV of precomputed vectors (the interface a
real language-model extraction would fill) or from a deterministic
synthetic generator built on category prototypes.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus
from .errors import FormatError, InvalidArgument
from .numkit import SeededRng, pca_fit, pca_project

log = logging.getLogger(__name__)


@dataclass
class SemanticTable:
    embeddings: np.ndarray  # (items, dim) float64
    source: str

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def n_items(self) -> int:
        return int(self.embeddings.shape[0])

    def unit_rows(self) -> np.ndarray:
        norms = np.linalg.norm(self.embeddings, axis=1, keepdims=True)
        return self.embeddings / np.maximum(norms, 1e-12)


def load_semantic_tsv(path: str, corpus: Corpus) -> SemanticTable:
    """Read `item<TAB>v1,v2,...,vd` rows covering every vocabulary item.

    Rows are reordered to dense item-index order; values may be stored in
    single precision and are widened to float64 on load.
    """
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected `item<TAB>values`")
            item, values = parts
            try:
                vec = np.asarray([float(v) for v in values.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise FormatError(
                    f"{path}:{lineno}: item {item!r} has {vec.size} dims, expected {dim}"
                )
            vectors[item] = vec
    missing = [it for it in corpus.item_ids if it not in vectors]
    if missing:
        raise FormatError(f"semantic file {path} missing item {missing[0]!r} "
                          f"({len(missing)} missing in total)")
    if dim is None:
        raise FormatError(f"semantic file {path} is empty")
    if dim < 8:
        log.warning("semantic dimension %d is below the recommended minimum of 8", dim)
    table = np.stack([vectors[it] for it in corpus.item_ids])
    if not np.all(np.isfinite(table)):
        raise FormatError(f"semantic file {path} contains non-finite values")
    return SemanticTable(table, source=f"file:{os.path.basename(path)}")


def save_semantic_tsv(table: SemanticTable, corpus: Corpus, path: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for item, row in zip(corpus.item_ids, table.embeddings):
            fh.write(item + "\t" + ",".join(f"{v:.8g}" for v in row) + "\n")
    os.replace(tmp, path)


def synth_semantics(
    categories: np.ndarray, dim: int, noise_sigma: float = 0.1, rng: SeededRng | None = None
) -> SemanticTable:
    """Unit-norm rows around one unit prototype per category.

    Prototypes are orthonormal whenever dim allows. The Gaussian noise is
    scaled per coordinate by sigma/sqrt(dim), so the total noise power is
    sigma^2 regardless of dimension and category separation is
    dimension-independent.
    """
    if rng is None:
        raise InvalidArgument("synth_semantics needs a SeededRng")
    cats = np.asarray(categories, dtype=np.int64)
    n_cats = int(cats.max()) + 1 if cats.size else 0
    if dim < 8:
        raise InvalidArgument("semantic dimension must be >= 8")
    if dim < n_cats:
        log.warning("semantic dim %d below category count %d; prototypes will overlap", dim, n_cats)
    gen = rng.gen
    protos = gen.standard_normal((n_cats, dim))
    if dim >= n_cats:
        # orthonormal prototypes give well-separated categories
        protos = np.linalg.qr(protos.T)[0].T[:n_cats]
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    scale = noise_sigma / np.sqrt(dim)
    rows = protos[cats] + scale * gen.standard_normal((cats.size, dim))
    rows /= np.maximum(np.linalg.norm(rows, axis=1, keepdims=True), 1e-12)
    return SemanticTable(rows, source=f"synth:c{n_cats}-d{dim}")


def reduce(table: SemanticTable, d_h: int, max_iter: int = 20000) -> np.ndarray:
    """Project embeddings onto their top d_h principal components.

    The output has one row per item and d_h columns, matching the hidden
    width the collaborative fusion expects. max_iter is raised well above
    the power-iteration default because the trailing components of noisy
    embeddings have slowly separating eigenvalues.
    """
    if d_h > min(table.n_items - 1, table.dim):
        raise InvalidArgument(
            f"cannot keep {d_h} components of a {table.n_items}x{table.dim} table"
        )
    components, _ = pca_fit(table.embeddings, d_h, max_iter=max_iter)
    return pca_project(table.embeddings, components)
