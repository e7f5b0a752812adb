"""Nearest-neighbour search over descriptors and retrieval scoring.

Real and byte descriptors are ranked by cosine similarity (byte payloads
are dequantized through their stored scale first); bit descriptors by
Hamming distance. Ties always break toward the lexicographically smaller
id so rankings are reproducible.

Datasets follow the numbered-filename convention: images whose stems
share the same leading group number (all digits but the last two) are
relevant to each other, the first image of each group is its query, and
the query itself never appears in its own ranking.

File fixtures:
  * image rasters  — magic "IMG1", u16 channels/height/width (LE), then
    row-major uint8 samples; loaded as floats in [0, 1].
  * ground truth   — one line per query: "query_id: id1 id2 ...".
  * result lists   — CSV with header "query_id,rank,id,score".
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor import Descriptor, dequantize_descriptor

IMAGE_MAGIC = b"IMG1"


@dataclass
class RetrievalIndex:
    entries: dict[str, Descriptor]

    @property
    def precision(self) -> str:
        first = next(iter(self.entries.values()))
        return first.precision

    def __len__(self) -> int:
        return len(self.entries)


def build_index(descriptors: dict[str, Descriptor]) -> RetrievalIndex:
    if not descriptors:
        raise ValueError("empty descriptor set")
    precisions = {d.precision for d in descriptors.values()}
    if len(precisions) != 1:
        raise ValueError(f"an index holds one precision class, got {sorted(precisions)}")
    dims = {d.dim for d in descriptors.values()}
    if len(dims) != 1:
        raise ValueError(f"descriptor lengths disagree: {sorted(dims)}")
    return RetrievalIndex(dict(descriptors))


def _comparable(desc: Descriptor) -> np.ndarray:
    if desc.precision == "byte":
        return dequantize_descriptor(desc)
    return np.asarray(desc.values, dtype=np.float64)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def _hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(a != b))


def search(index: RetrievalIndex, query: Descriptor, k: int | None = None,
           exclude: str | None = None) -> list[tuple[str, float]]:
    """Ranked (id, score) pairs. Score is cosine similarity (higher is
    better) or, for bit descriptors, Hamming distance (lower is better)."""
    if query.precision != index.precision:
        raise ValueError(
            f"query precision {query.precision!r} != index precision {index.precision!r}")
    sample = next(iter(index.entries.values()))
    if query.dim != sample.dim:
        raise ValueError(f"query length {query.dim} != index length {sample.dim}")
    bitwise = index.precision == "bit"
    qv = None if bitwise else _comparable(query)
    scored = []
    for name, desc in index.entries.items():
        if name == exclude:
            continue
        if bitwise:
            score = _hamming(query.values, desc.values)
        else:
            score = _cosine(qv, _comparable(desc))
        scored.append((name, score))
    scored.sort(key=(lambda t: (t[1], t[0])) if bitwise else (lambda t: (-t[1], t[0])))
    if k is not None:
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        scored = scored[:k]
    return [(name, (float(s) if not bitwise else int(s))) for name, s in scored]


def average_precision(ranked_ids, relevant) -> float:
    """Mean of precision@k over the ranks holding relevant items.

    The divisor is the full relevant-set size, so items missing from the
    ranking count as misses.
    """
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = 0
    total = 0.0
    for rank, name in enumerate(ranked_ids, start=1):
        if name in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def mean_average_precision(index: RetrievalIndex, ground_truth: dict,
                           query_ids=None) -> float:
    """Unweighted mean AP over the queries; each query is ranked against
    every other index entry (never itself)."""
    mAP, _ = evaluate(index, ground_truth, query_ids)
    return mAP


def evaluate(index: RetrievalIndex, ground_truth: dict,
             query_ids=None) -> tuple[float, dict[str, float]]:
    if query_ids is None:
        query_ids = list(ground_truth)
    if not query_ids:
        raise ValueError("no queries to evaluate")
    per_query = {}
    for qid in query_ids:
        if qid not in ground_truth:
            raise ValueError(f"query {qid!r} has no ground-truth entry")
        if qid not in index.entries:
            raise ValueError(f"query {qid!r} is not in the index")
        ranked = search(index, index.entries[qid], exclude=qid)
        per_query[qid] = average_precision([name for name, _ in ranked],
                                           ground_truth[qid])
    return sum(per_query.values()) / len(per_query), per_query


# ---------------------------------------------------------------------------
# datasets on disk

def write_image(path, image: np.ndarray) -> None:
    """Store a float image in [0, 1] as an 8-bit raster."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"image must be C,H,W, got shape {image.shape}")
    c, h, w = image.shape
    if max(c, h, w) > 0xFFFF:
        raise ValueError(f"image dimensions {image.shape} exceed u16")
    samples = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<HHH", c, h, w) + samples.tobytes())


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not an image raster (bad magic)")
    if len(data) < 10:
        raise ValueError(f"{path}: truncated header")
    c, h, w = struct.unpack_from("<HHH", data, 4)
    count = c * h * w
    if len(data) != 10 + count:
        raise ValueError(f"{path}: expected {10 + count} bytes, found {len(data)}")
    samples = np.frombuffer(data, np.uint8, count, 10)
    return samples.reshape(c, h, w).astype(np.float64) / 255.0


def holidays_group(stem: str) -> str:
    """Group key = all but the last two digits of the numeric stem."""
    return stem[:-2] if len(stem) > 2 else stem


def ingest_dataset(directory, group_rule=holidays_group):
    """Load every *.img raster under directory and derive ground truth.

    Returns (images, ground_truth): images maps id -> float array in
    filename order; ground_truth maps each group's first id to the rest
    of its group. Groups with a single image produce no query (warned).
    """
    directory = Path(directory)
    files = sorted(directory.glob("*.img"))
    if not files:
        raise ValueError(f"no .img files under {directory}")
    images = {}
    groups: dict[str, list[str]] = {}
    for path in files:
        stem = path.stem
        if stem in images:
            raise ValueError(f"duplicate image id {stem!r}")
        images[stem] = read_image(path)
        groups.setdefault(group_rule(stem), []).append(stem)
    ground_truth = {}
    for key, members in groups.items():
        if len(members) < 2:
            warnings.warn(f"group {key!r} has a single image; no query emitted")
            continue
        ground_truth[members[0]] = list(members[1:])
    return images, ground_truth


def write_ground_truth(path, ground_truth: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, relevant in ground_truth.items():
            fh.write(f"{qid}: {' '.join(relevant)}\n")


def read_ground_truth(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            qid, sep, rest = line.partition(":")
            if not sep or not qid.strip():
                raise ValueError(f"{path}:{line_no}: expected 'query_id: id ...'")
            out[qid.strip()] = rest.split()
    if not out:
        raise ValueError(f"{path}: no ground-truth lines")
    return out


def write_results_csv(path, results: dict[str, list[tuple[str, float]]],
                      bitwise: bool = False) -> None:
    """results maps query_id -> ranked (id, score) pairs."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("query_id,rank,id,score\n")
        for qid, ranked in results.items():
            for rank, (name, score) in enumerate(ranked, start=1):
                text = str(int(score)) if bitwise else f"{score:.6f}"
                fh.write(f"{qid},{rank},{name},{text}\n")
