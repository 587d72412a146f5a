"""Visual concept libraries: cluster discovered slots, compose them into
novel scenes with mask-overlap rejection, and edit slot sets directly.

A library clusters slot vectors with k-means (k-means++ seeding, Lloyd
iterations) and keeps every member slot together with its low-resolution
object mask from the attention readout. Composition samples one member per
picked cluster and resamples whenever two chosen masks overlap above an
IoU threshold. Editing operations are exact set manipulations on slot
arrays; the decode step is the only stochastic part of an edit pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import sdt
from .rng import Rng
from .tensor import ContractError


class CompositionError(RuntimeError):
    """Overlap rejection exhausted max_tries; carries the offending pair."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


def kmeans(points: np.ndarray, k: int, max_iters=50, seed=0, history=None):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (assignments, centroids). Stops at an assignment fixpoint or
    after max_iters; an emptied cluster is re-seeded to the point farthest
    from its assigned centroid. Pass a list as `history` to collect the
    inertia after each assignment step.
    """
    points = np.asarray(points, dtype=np.float64)
    p = points.shape[0]
    if p < k:
        raise ContractError(f"need at least k={k} points, got {p}")
    rng = Rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, p, ()))
    centroids[0] = points[first]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            pick = int(rng.integers(0, p, ()))
        else:
            u = float(rng.uniform(0.0, 1.0, ())) * total
            pick = int(np.searchsorted(np.cumsum(d2), u))
            pick = min(pick, p - 1)
        centroids[j] = points[pick]
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))

    assign = np.full(p, -1, dtype=np.int64)
    for _ in range(max_iters):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if history is not None:
            history.append(float(dist[np.arange(p), new_assign].sum()))
        for j in range(k):
            members = new_assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                farthest = int(dist[np.arange(p), new_assign].argmax())
                centroids[j] = points[farthest]
                new_assign[farthest] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return assign, centroids


def kmeans_inertia(points, assign, centroids) -> float:
    return float(((np.asarray(points) - centroids[assign]) ** 2).sum())


@dataclass
class ConceptMember:
    vector: np.ndarray    # (d_slot,)
    source: int           # index of the originating sample
    mask: np.ndarray      # low-res boolean object mask


@dataclass
class ConceptLibrary:
    k: int
    centroids: np.ndarray             # (k, d_slot)
    members: list                     # k lists of ConceptMember

    def cluster_sizes(self):
        return [len(m) for m in self.members]


@dataclass
class Composition:
    slots: np.ndarray                 # (n, d_slot)
    provenance: list                  # (cluster id, member id) per slot


def build_library(slot_sets, k: int, seed=0) -> ConceptLibrary:
    """Cluster slots pooled from (slots (N,D), attention (N,M)) pairs.

    Each slot's mask is the set of latent locations where it wins the
    attention argmax. Deterministic given the seed.
    """
    if not slot_sets:
        raise ContractError("build_library needs at least one slot set")
    vectors, masks, sources = [], [], []
    for src, (slots, attn) in enumerate(slot_sets):
        slots = np.asarray(slots, dtype=np.float64)
        attn = np.asarray(attn, dtype=np.float64)
        winner = attn.argmax(axis=0)                      # (M,) slot index per location
        for i in range(slots.shape[0]):
            vectors.append(slots[i])
            masks.append(winner == i)
            sources.append(src)
    points = np.stack(vectors)
    if points.shape[0] < k:
        raise ContractError(f"{points.shape[0]} slots cannot form {k} clusters")
    assign, centroids = kmeans(points, k, seed=seed)
    members = [[] for _ in range(k)]
    for idx in range(points.shape[0]):
        members[int(assign[idx])].append(
            ConceptMember(vector=points[idx], source=sources[idx], mask=masks[idx]))
    return ConceptLibrary(k=k, centroids=centroids, members=members)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0


def compose(lib: ConceptLibrary, picks, threshold=0.1, seed=0, max_tries=50) -> Composition:
    """Sample one member per picked cluster, rejecting overlapping masks.

    Pairs whose mask IoU exceeds `threshold` are resampled up to
    `max_tries` times; exhaustion raises CompositionError naming the pair.
    """
    for c in picks:
        if not 0 <= c < lib.k:
            raise ContractError(f"cluster id {c} outside 0..{lib.k - 1}")
        if not lib.members[c]:
            raise ContractError(f"cluster {c} is empty")
    rng = Rng(seed)
    chosen = [int(rng.integers(0, len(lib.members[c]), ())) for c in picks]
    bad_pair = None
    for _ in range(max_tries):
        bad_pair = None
        for a in range(len(picks)):
            for b in range(a + 1, len(picks)):
                ma = lib.members[picks[a]][chosen[a]].mask
                mb = lib.members[picks[b]][chosen[b]].mask
                if mask_iou(ma, mb) > threshold:
                    bad_pair = (a, b)
                    break
            if bad_pair:
                break
        if bad_pair is None:
            slots = np.stack([lib.members[picks[i]][chosen[i]].vector
                              for i in range(len(picks))])
            prov = [(picks[i], chosen[i]) for i in range(len(picks))]
            return Composition(slots=slots, provenance=prov)
        # resample the later member of the offending pair
        b = bad_pair[1]
        chosen[b] = int(rng.integers(0, len(lib.members[picks[b]]), ()))
    raise CompositionError(
        f"could not satisfy overlap threshold {threshold} after {max_tries} tries "
        f"(clusters {picks[bad_pair[0]]} and {picks[bad_pair[1]]})", pair=bad_pair)


def edit_remove(slots: np.ndarray, index: int) -> np.ndarray:
    """Drop one slot; decoding then conditions on N-1 (possibly 0) tokens."""
    slots = np.asarray(slots)
    n = slots.shape[-2]
    if not 0 <= index < n:
        raise ContractError(f"slot index {index} outside 0..{n - 1}")
    return np.delete(slots, index, axis=-2)


def edit_insert(slots: np.ndarray, index: int, vector: np.ndarray) -> np.ndarray:
    slots = np.asarray(slots)
    return np.insert(slots, index, np.asarray(vector), axis=-2)


def edit_swap(slots: np.ndarray, index: int, replacement: np.ndarray) -> np.ndarray:
    """Replace one slot vector, leaving all others untouched."""
    slots = np.asarray(slots).copy()
    replacement = np.asarray(replacement)
    if replacement.shape != slots[..., index, :].shape:
        raise ContractError(
            f"replacement width {replacement.shape} != slot width {slots[..., index, :].shape}")
    slots[..., index, :] = replacement
    return slots


# -- persistence ------------------------------------------------------------------


def save_library(lib: ConceptLibrary, directory) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = {"centroids": lib.centroids.astype(np.float32)}
    lines = [f"k {lib.k}"]
    for c, members in enumerate(lib.members):
        lines.append(f"cluster {c} size {len(members)}")
        for m_id, member in enumerate(members):
            entries[f"c{c}/m{m_id}/vector"] = member.vector.astype(np.float32)
            entries[f"c{c}/m{m_id}/mask"] = member.mask.astype(np.uint8)
            lines.append(f"member {c} {m_id} source {member.source}")
    sdt.save_checkpoint(root, entries, meta={"kind": "concept_library"})
    (root / "library.txt").write_text("\n".join(lines) + "\n")


def load_library(directory) -> ConceptLibrary:
    root = Path(directory)
    entries, _ = sdt.load_checkpoint(root)
    text = (root / "library.txt").read_text().splitlines()
    k = int(text[0].split()[1])
    members = [[] for _ in range(k)]
    for line in text[1:]:
        parts = line.split()
        if parts[0] == "member":
            c, m_id, source = int(parts[1]), int(parts[2]), int(parts[4])
            members[c].append(ConceptMember(
                vector=entries[f"c{c}/m{m_id}/vector"].astype(np.float64),
                source=source,
                mask=entries[f"c{c}/m{m_id}/mask"].astype(bool)))
    return ConceptLibrary(k=k, centroids=entries["centroids"].astype(np.float64),
                          members=members)
