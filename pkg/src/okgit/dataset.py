"""OpenKG ingestion: phrase vocabularies and triple splits, plus gold canonicalization clusters."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
REQUIRED_FILES = ("npvocab.txt", "rpvocab.txt", "train.tsv", "valid.tsv", "test.tsv", "clusters.tsv")

# Prepended to an RP string to name its inverse; the phrase encoder sees it as one extra token.
INVERSE_MARKER = "__inv__"


class DatasetError(Exception):
    """Raised when a dataset directory is missing files or violates an index invariant."""


@dataclass(frozen=True)
class Triple:
    head: int
    rp: int
    tail: int
    label: int = 1

    def key(self) -> tuple[int, int, int]:
        return (self.head, self.rp, self.tail)


@dataclass
class ClusterMap:
    """Partition of NP ids into gold canonicalization clusters."""

    np_to_cluster: list[int]
    cluster_to_nps: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.cluster_to_nps:
            self.cluster_to_nps = _invert(self.np_to_cluster)

    @classmethod
    def singletons(cls, n: int) -> "ClusterMap":
        return cls(list(range(n)))

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_to_nps)

    def members(self, np_id: int) -> list[int]:
        return self.cluster_to_nps[self.np_to_cluster[np_id]]


def _invert(np_to_cluster: list[int]) -> list[list[int]]:
    n = max(np_to_cluster) + 1 if np_to_cluster else 0
    out: list[list[int]] = [[] for _ in range(n)]
    for np_id, c in enumerate(np_to_cluster):
        out[c].append(np_id)
    return out


@dataclass
class OpenKG:
    nps: list[str]
    rps: list[str]
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    clusters: ClusterMap
    # RP count before inverse augmentation; equals len(rps) until augmented.
    n_base_rps: int = -1

    def __post_init__(self):
        if self.n_base_rps < 0:
            self.n_base_rps = len(self.rps)

    @property
    def augmented(self) -> bool:
        return self.n_base_rps != len(self.rps)

    def split(self, name: str) -> list[Triple]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def stats(self) -> dict[str, float]:
        n_clusters = self.clusters.n_clusters
        return {
            "nps": len(self.nps),
            "rps": len(self.rps),
            "clusters": n_clusters,
            "avg_nps_per_cluster": round(len(self.nps) / n_clusters, 2) if n_clusters else 0.0,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }

    def all_triples(self) -> Iterable[Triple]:
        for name in SPLITS:
            yield from self.split(name)


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n").rstrip("\r") for line in f]


def _read_triples(path: Path, n_nps: int, n_rps: int) -> list[Triple]:
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path.name}:{lineno}: expected 3 tab-separated ids, got {len(parts)} fields")
            try:
                h, r, t = (int(p) for p in parts)
            except ValueError as exc:
                raise DatasetError(f"{path.name}:{lineno}: non-integer id ({exc})") from None
            if not (0 <= h < n_nps and 0 <= t < n_nps):
                raise DatasetError(f"{path.name}:{lineno}: NP id out of range [0, {n_nps})")
            if not 0 <= r < n_rps:
                raise DatasetError(f"{path.name}:{lineno}: RP id out of range [0, {n_rps})")
            triples.append(Triple(h, r, t))
    return triples


def _read_clusters(path: Path, n_nps: int) -> ClusterMap:
    assign: dict[int, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetError(f"{path.name}:{lineno}: expected np_id<TAB>cluster_id")
            try:
                np_id = int(parts[0])
            except ValueError:
                raise DatasetError(f"{path.name}:{lineno}: non-integer NP id") from None
            if not 0 <= np_id < n_nps:
                raise DatasetError(f"{path.name}:{lineno}: NP id out of range [0, {n_nps})")
            if np_id in assign:
                logger.warning("%s:%d: NP %d assigned twice; keeping the last assignment", path.name, lineno, np_id)
            assign[np_id] = parts[1]
    missing = [i for i in range(n_nps) if i not in assign]
    if missing:
        logger.warning("%d NPs have no cluster entry; treating them as singletons", len(missing))
    dense: dict[str, int] = {}
    np_to_cluster = []
    for np_id in range(n_nps):
        label = assign.get(np_id, f"__singleton_{np_id}")
        np_to_cluster.append(dense.setdefault(label, len(dense)))
    return ClusterMap(np_to_cluster)


def _check_disjoint(kg: OpenKG) -> None:
    seen: dict[tuple[int, int, int], str] = {}
    for name in SPLITS:
        for tr in kg.split(name):
            other = seen.get(tr.key())
            if other is not None and other != name:
                logger.warning("triple %s occurs in both %s and %s", tr.key(), other, name)
            seen.setdefault(tr.key(), name)


def load_openkg(directory: str | Path) -> OpenKG:
    """Load a dataset directory in the canonical TSV layout.

    Raises
    ------
    DatasetError
        If a required file is missing or any id falls outside its vocabulary.
    """
    directory = Path(directory)
    for name in REQUIRED_FILES:
        if not (directory / name).is_file():
            raise DatasetError(f"missing dataset file: {directory / name}")
    nps = _read_lines(directory / "npvocab.txt")
    rps = _read_lines(directory / "rpvocab.txt")
    # A trailing newline is not an extra vocabulary entry.
    while nps and nps[-1] == "":
        nps.pop()
    while rps and rps[-1] == "":
        rps.pop()
    splits = {name: _read_triples(directory / f"{name}.tsv", len(nps), len(rps)) for name in SPLITS}
    clusters = _read_clusters(directory / "clusters.tsv", len(nps))
    kg = OpenKG(nps, rps, splits["train"], splits["valid"], splits["test"], clusters)
    _check_disjoint(kg)
    return kg


def save_openkg(kg: OpenKG, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "npvocab.txt").write_text("".join(s + "\n" for s in kg.nps), encoding="utf-8")
    (directory / "rpvocab.txt").write_text("".join(s + "\n" for s in kg.rps), encoding="utf-8")
    for name in SPLITS:
        lines = "".join(f"{t.head}\t{t.rp}\t{t.tail}\n" for t in kg.split(name))
        (directory / f"{name}.tsv").write_text(lines, encoding="ascii")
    lines = "".join(f"{i}\t{c}\n" for i, c in enumerate(kg.clusters.np_to_cluster))
    (directory / "clusters.tsv").write_text(lines, encoding="ascii")


def filter_single_token(
    kg: OpenKG,
    token_vocab: set[str],
    tokenize: Callable[[str], list[str]] | None = None,
) -> OpenKG:
    """Keep only triples whose head and tail NPs are one LM vocabulary token.

    ``tokenize`` should be the LM's own tokenizer (word pieces); by default
    whitespace splitting of the lowercased NP is used. Surviving NPs and RPs
    are re-indexed densely in their original order; unused ones are dropped.
    """
    if kg.augmented:
        raise DatasetError("filter before adding inverse relations")
    tokenize = tokenize or (lambda s: s.lower().split())

    def single(np_id: int) -> bool:
        toks = tokenize(kg.nps[np_id])
        return len(toks) == 1 and toks[0] in token_vocab

    ok = [single(i) for i in range(len(kg.nps))]
    kept = {name: [t for t in kg.split(name) if ok[t.head] and ok[t.tail]] for name in SPLITS}

    used_nps = sorted({i for ts in kept.values() for t in ts for i in (t.head, t.tail)})
    used_rps = sorted({t.rp for ts in kept.values() for t in ts})
    np_map = {old: new for new, old in enumerate(used_nps)}
    rp_map = {old: new for new, old in enumerate(used_rps)}

    def remap(ts: list[Triple]) -> list[Triple]:
        return [Triple(np_map[t.head], rp_map[t.rp], np_map[t.tail], t.label) for t in ts]

    dense: dict[int, int] = {}
    np_to_cluster = [dense.setdefault(kg.clusters.np_to_cluster[old], len(dense)) for old in used_nps]
    out = OpenKG(
        nps=[kg.nps[i] for i in used_nps],
        rps=[kg.rps[i] for i in used_rps],
        train=remap(kept["train"]),
        valid=remap(kept["valid"]),
        test=remap(kept["test"]),
        clusters=ClusterMap(np_to_cluster),
    )
    if not (out.train or out.valid or out.test):
        logger.warning("single-token filter removed every triple")
    return out


def augment_inverse_relations(kg: OpenKG) -> OpenKG:
    """Double the RP vocabulary with inverse relations and add (t, r_inv, h) for each triple."""
    if kg.augmented or any(rp.startswith(INVERSE_MARKER + " ") for rp in kg.rps):
        raise DatasetError("KG already carries inverse relations")
    n = len(kg.rps)

    def aug(ts: list[Triple]) -> list[Triple]:
        return list(ts) + [Triple(t.tail, t.rp + n, t.head, t.label) for t in ts]

    return replace(
        kg,
        rps=list(kg.rps) + [f"{INVERSE_MARKER} {rp}" for rp in kg.rps],
        train=aug(kg.train),
        valid=aug(kg.valid),
        test=aug(kg.test),
        n_base_rps=n,
    )


def query_index(kg: OpenKG, split: str | Iterable[str]) -> dict[tuple[int, int], set[int]]:
    """Map each (head, rp) query in the split(s) to its set of true tails."""
    names = [split] if isinstance(split, str) else list(split)
    index: dict[tuple[int, int], set[int]] = defaultdict(set)
    for name in names:
        for t in kg.split(name):
            index[(t.head, t.rp)].add(t.tail)
    return dict(index)


def base_query(kg: OpenKG, head: int, rp: int) -> tuple[str, int, int]:
    """Resolve a (possibly inverse) query to (direction, head-id, original rp-id)."""
    if rp >= kg.n_base_rps:
        return ("head", head, rp - kg.n_base_rps)
    return ("tail", head, rp)


def convert_care_release(src: str | Path, dst: str | Path) -> OpenKG:
    """Convert a CaRE-style release directory into the canonical TSV layout.

    Expected source files: ``ent2id.txt`` and ``rel2id.txt`` (``phrase<TAB>id``,
    an optional leading count line is skipped), ``{train,valid,test}_trip.txt``
    (``head<TAB>rel<TAB>tail`` as ids or phrases) and ``gold_npclust.txt``
    (``np_id<TAB>count<TAB>member ids...``; members may be space or tab separated).
    """
    src = Path(src)
    for name in ("ent2id.txt", "rel2id.txt", "train_trip.txt", "valid_trip.txt", "test_trip.txt", "gold_npclust.txt"):
        if not (src / name).is_file():
            raise DatasetError(f"missing release file: {src / name}")

    def read_vocab(path: Path) -> list[str]:
        pairs = []
        for lineno, line in enumerate(_read_lines(path), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) == 1 and lineno == 1 and parts[0].strip().isdigit():
                continue
            if len(parts) < 2:
                raise DatasetError(f"{path.name}:{lineno}: expected phrase<TAB>id")
            pairs.append((int(parts[-1]), "\t".join(parts[:-1])))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise DatasetError(f"{path.name}: ids are not a dense 0-based range")
        return [s for _, s in pairs]

    nps = read_vocab(src / "ent2id.txt")
    rps = read_vocab(src / "rel2id.txt")
    np_ids = {s: i for i, s in enumerate(nps)}
    rp_ids = {s: i for i, s in enumerate(rps)}

    def resolve(tok: str, table: dict[str, int], n: int, where: str) -> int:
        if tok.isdigit() and int(tok) < n:
            return int(tok)
        if tok in table:
            return table[tok]
        raise DatasetError(f"{where}: unknown phrase or id {tok!r}")

    splits = {}
    for name in SPLITS:
        path = src / f"{name}_trip.txt"
        ts = []
        for lineno, line in enumerate(_read_lines(path), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path.name}:{lineno}: expected 3 fields")
            where = f"{path.name}:{lineno}"
            ts.append(Triple(
                resolve(parts[0], np_ids, len(nps), where),
                resolve(parts[1], rp_ids, len(rps), where),
                resolve(parts[2], np_ids, len(nps), where),
            ))
        splits[name] = ts

    parent = list(range(len(nps)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for lineno, line in enumerate(_read_lines(src / "gold_npclust.txt"), start=1):
        fields = line.replace("\t", " ").split()
        if not fields:
            continue
        ids = [int(fields[0])] + [int(x) for x in fields[2:]]
        if any(not 0 <= i < len(nps) for i in ids):
            raise DatasetError(f"gold_npclust.txt:{lineno}: NP id out of range")
        root = find(ids[0])
        for i in ids[1:]:
            parent[find(i)] = root
    dense: dict[int, int] = {}
    clusters = ClusterMap([dense.setdefault(find(i), len(dense)) for i in range(len(nps))])

    kg = OpenKG(nps, rps, splits["train"], splits["valid"], splits["test"], clusters)
    save_openkg(kg, dst)
    return kg
