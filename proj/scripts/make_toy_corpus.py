#!/usr/bin/env python3
"""Generate the synthetic toy corpus used by the example configs and tests.

Sentences come from a small probabilistic grammar so that word order carries
structure a toy teacher can learn. Output is deterministic for a given seed.
"""

import argparse
import random
from pathlib import Path

DETS = ["the", "a", "every", "some", "this", "that"]
ADJS = ["small", "old", "green", "quiet", "bright", "heavy", "quick", "strange", "warm", "cold",
        "tall", "young", "red", "dark", "gentle", "proud"]
NOUNS = ["cat", "dog", "farmer", "river", "city", "child", "teacher", "boat", "garden", "bird",
         "house", "road", "forest", "letter", "window", "market", "song", "horse", "village", "stone",
         "student", "engine", "island", "lamp"]
VERBS_T = ["sees", "follows", "builds", "finds", "carries", "paints", "watches", "opens", "hears",
           "crosses", "remembers", "visits"]
VERBS_I = ["sleeps", "waits", "sings", "runs", "falls", "laughs", "shines", "rests", "wanders"]
ADVS = ["slowly", "today", "again", "quietly", "often", "never", "early", "late"]
PREPS = ["near", "behind", "under", "beside", "across", "inside"]
CONJ = ["and", "but", "while", "because"]


def noun_phrase(rng):
    words = [rng.choice(DETS)]
    if rng.random() < 0.5:
        words.append(rng.choice(ADJS))
    words.append(rng.choice(NOUNS))
    if rng.random() < 0.25:
        words += [rng.choice(PREPS)] + noun_phrase_simple(rng)
    return words


def noun_phrase_simple(rng):
    return [rng.choice(DETS), rng.choice(NOUNS)]


def clause(rng):
    words = noun_phrase(rng)
    if rng.random() < 0.6:
        words += [rng.choice(VERBS_T)] + noun_phrase(rng)
    else:
        words.append(rng.choice(VERBS_I))
    if rng.random() < 0.4:
        words.append(rng.choice(ADVS))
    return words


def sentence(rng):
    words = clause(rng)
    if rng.random() < 0.35:
        words += [rng.choice(CONJ)] + clause(rng)
    return " ".join(words)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("data/toy"))
    ap.add_argument("--train", type=int, default=4000)
    ap.add_argument("--valid", type=int, default=400)
    ap.add_argument("--seed", type=int, default=13)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    seen = set()
    lines = []
    while len(lines) < args.train + args.valid:
        s = sentence(rng)
        if s not in seen:
            seen.add(s)
            lines.append(s)
    (args.out / "train.txt").write_text("\n".join(lines[: args.train]) + "\n")
    (args.out / "valid.txt").write_text("\n".join(lines[args.train:]) + "\n")


if __name__ == "__main__":
    main()
