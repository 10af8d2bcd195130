#!/usr/bin/env python3
"""Writes the default training fixture: deterministic short-story prose.

The text is produced from a small probabilistic grammar so it carries real
word, punctuation and dialogue statistics without depending on any external
dataset. Re-running with the same seed reproduces the file byte for byte.
"""
import argparse
import random

NAMES = ["Anna", "Tom", "Clara", "Henry", "Mara", "Peter", "Lucy", "Edmund",
         "Rose", "Walter", "Ida", "Oscar", "Nell", "Jacob", "Martha", "Silas"]
PLACES = ["the village", "the old mill", "the harbour", "the forest", "the market",
          "the church", "the river bank", "the inn", "the farm", "the castle",
          "the school", "the bridge", "the garden", "the station"]
NOUNS = ["letter", "lamp", "horse", "dog", "key", "basket", "boat", "coat",
         "bread", "book", "candle", "door", "window", "road", "storm", "song",
         "ring", "map", "knife", "cart", "apple", "table", "fire", "clock"]
ADJS = ["old", "small", "quiet", "cold", "bright", "dark", "heavy", "strange",
        "warm", "broken", "little", "red", "green", "long", "narrow", "kind"]
VERBS_T = ["found", "carried", "opened", "lost", "mended", "sold", "watched",
           "took", "left", "painted", "hid", "wanted", "brought", "saw"]
VERBS_I = ["waited", "laughed", "slept", "listened", "wandered", "sighed",
           "smiled", "hurried", "stopped", "trembled", "returned", "sang"]
ADVS = ["slowly", "quietly", "at once", "again", "in silence", "with care",
        "at last", "for a while", "without a word", "before dawn"]
TIMES = ["In the morning", "That evening", "At noon", "Later", "The next day",
         "When the rain stopped", "Before supper", "Long ago", "At night"]
SAY = ["said", "asked", "whispered", "cried", "answered", "replied"]
LINES = ["Where have you been", "I do not know", "Come with me",
         "It is getting late", "Look at the sky", "We must go home",
         "Have you seen the {n}", "The {n} is gone", "Bring me the {n}",
         "I will wait here", "Tell me the truth", "Nobody saw us"]
PRON = {"Anna": "she", "Clara": "she", "Mara": "she", "Lucy": "she", "Rose": "she",
        "Ida": "she", "Nell": "she", "Martha": "she"}


def np(rng):
    if rng.random() < 0.5:
        return f"the {rng.choice(ADJS)} {rng.choice(NOUNS)}"
    return f"the {rng.choice(NOUNS)}"


def sentence(rng, who):
    he = PRON.get(who, "he")
    r = rng.random()
    if r < 0.2:
        return f"{rng.choice(TIMES)}, {who} {rng.choice(VERBS_T)} {np(rng)} near {rng.choice(PLACES)}."
    if r < 0.35:
        return f"{who} {rng.choice(VERBS_I)} {rng.choice(ADVS)}."
    if r < 0.5:
        line = rng.choice(LINES).format(n=rng.choice(NOUNS))
        mark = "?" if line.startswith(("Where", "Have")) else "."
        return f"\"{line}{mark}\" {he} {rng.choice(SAY)}."
    if r < 0.65:
        return f"The {rng.choice(NOUNS)} was {rng.choice(ADJS)}, and {he} {rng.choice(VERBS_I)}."
    if r < 0.8:
        other = rng.choice(NAMES)
        return f"{who} and {other} went to {rng.choice(PLACES)} and {rng.choice(VERBS_T)} {np(rng)}."
    return f"{he.capitalize()} {rng.choice(VERBS_T)} {np(rng)} and {rng.choice(VERBS_I)} {rng.choice(ADVS)}."


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--chars", type=int, default=260_000)
    ap.add_argument("--seed", type=int, default=1887)
    ap.add_argument("--out", default="data/corpus.txt")
    args = ap.parse_args()
    rng = random.Random(args.seed)
    parts, size, chapter = [], 0, 1
    while size < args.chars:
        if rng.random() < 0.02:
            block = f"\nCHAPTER {chapter}\n\n"
            chapter += 1
        else:
            who = rng.choice(NAMES)
            block = " ".join(sentence(rng, who) for _ in range(rng.randint(3, 7))) + "\n\n"
        parts.append(block)
        size += len(block)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("".join(parts))


if __name__ == "__main__":
    main()
