"""Small synthetic OpenKGs for tests."""

from __future__ import annotations

import random

from okgit.dataset import ClusterMap, OpenKG, Triple

PEOPLE = ["bach", "mozart", "handel", "haydn", "liszt", "chopin", "brahms", "verdi"]
PLACES = ["leipzig", "vienna", "london", "paris", "rome", "berlin", "weimar", "milan"]
YEARS = ["1750", "1791", "1759", "1809", "1886", "1849", "1897", "1901"]
RELATIONS = [
    ("moved to", PEOPLE, PLACES),
    ("was born in", PEOPLE, PLACES),
    ("died in", PEOPLE, YEARS),
    ("is the capital of", PLACES, PLACES),
    ("met", PEOPLE, PEOPLE),
]


def make_toy_kg(seed: int = 0, n_triples: int = 120, aliases: bool = True) -> OpenKG:
    """Typed toy KG: each relation links fixed type pairs; a few NPs get an alias cluster-mate."""
    rng = random.Random(seed)
    nps = PEOPLE + PLACES + YEARS
    np_to_cluster = list(range(len(nps)))
    if aliases:
        for name, canon in (("j.s. bach", "bach"), ("wien", "vienna"), ("w.a. mozart", "mozart")):
            nps.append(name)
            np_to_cluster.append(np_to_cluster[nps.index(canon)])
    index = {s: i for i, s in enumerate(nps)}
    rps = [r for r, _, _ in RELATIONS]
    seen = set()
    triples = []
    while len(triples) < n_triples:
        r = rng.randrange(len(RELATIONS))
        _, heads, tails = RELATIONS[r]
        h, t = rng.choice(heads), rng.choice(tails)
        if aliases and rng.random() < 0.1:
            h = {"bach": "j.s. bach", "mozart": "w.a. mozart"}.get(h, h)
            t = {"vienna": "wien"}.get(t, t)
        key = (index[h], r, index[t])
        if key in seen or h == t:
            continue
        seen.add(key)
        triples.append(Triple(*key))
    n_valid = n_test = max(1, n_triples // 10)
    test = triples[:n_test]
    valid = triples[n_test : n_test + n_valid]
    train = triples[n_test + n_valid :]
    dense: dict[int, int] = {}
    clusters = ClusterMap([dense.setdefault(c, len(dense)) for c in np_to_cluster])
    return OpenKG(nps, rps, train, valid, test, clusters)
