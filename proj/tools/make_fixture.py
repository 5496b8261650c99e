#!/usr/bin/env python3
"""Regenerates data/fixture: a 50-document gazetteer of invented towns with
long-form questions whose answers are sentences of the matching document."""

import argparse
import json
import random
from pathlib import Path

SYLLABLES = ["var", "nol", "tes", "bri", "kam", "dor", "lin", "ost", "mar", "vel", "sun", "har", "ele", "quo", "rid"]
REGIONS = ["Ardent", "Bellmoor", "Corvel", "Dunmere", "Esterholm", "Fallowmark"]
RIVERS = ["Amber", "Brisk", "Cold", "Deep", "Long", "Silver", "Slate"]
FOUNDERS = ["Ada Morrow", "Bram Keel", "Cora Vance", "Dell Ashby", "Edric Pole", "Fenna Hale", "Gil Strand",
            "Hester Lund", "Ivo Marsh", "Jora Flint"]
GOODS = ["wool", "cheese", "glass", "copper pots", "apple cider", "rope", "honey", "slate tiles", "clocks"]
FESTIVALS = ["lantern", "harvest", "river", "spring", "music", "kite"]
CITIES = ["Port Alden", "Greywater", "Hollin", "Kestrel Bay"]


def town_name(rng, taken):
    while True:
        name = "".join(rng.choice(SYLLABLES) for _ in range(2)).capitalize()
        if name not in taken:
            taken.add(name)
            return name


def make_town(rng, idx, taken):
    t = {
        "name": town_name(rng, taken),
        "region": rng.choice(REGIONS),
        "river": rng.choice(RIVERS),
        "founder": rng.choice(FOUNDERS),
        "year": rng.randrange(1100, 1900),
        "goods": rng.choice(GOODS),
        "festival": rng.choice(FESTIVALS),
        "city": rng.choice(CITIES),
        "id": f"town{idx:03d}",
    }
    t["sentences"] = {
        "where": f"{t['name']} is a town in the {t['region']} region on the {t['river']} river.",
        "founded": f"It was founded by {t['founder']} in {t['year']}.",
        "known": f"The people of {t['name']} are known for their {t['goods']} and a yearly {t['festival']} fair.",
        "reach": f"Visitors reach {t['name']} by the {t['region']} railway from {t['city']}.",
    }
    return t


QUESTIONS = {
    "where": "where is {name} and what river is it on?",
    "founded": "who founded {name} and when?",
    "known": "what is {name} known for?",
    "reach": "how do visitors travel to {name}?",
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "data" / "fixture"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--docs", type=int, default=50)
    args = ap.parse_args()
    rng = random.Random(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    taken = set()
    towns = [make_town(rng, i, taken) for i in range(args.docs)]

    with open(out / "corpus.jsonl", "w") as f:
        for t in towns:
            text = " ".join(t["sentences"][k] for k in ("where", "founded", "known", "reach"))
            f.write(json.dumps({"id": t["id"], "title": t["name"], "text": text}) + "\n")

    qa = []
    for t in towns:
        for kind in rng.sample(sorted(QUESTIONS), 2):
            answer = t["sentences"][kind]
            if kind == "founded":
                answer = f"{t['name']} was founded by {t['founder']} in {t['year']}."
            qa.append({"question": QUESTIONS[kind].format(name=t["name"]), "answers": [answer],
                       "provenance": [t["id"]]})
    rng.shuffle(qa)
    for i, q in enumerate(qa):
        q["id"] = f"q{i:03d}"
    n_valid = len(qa) // 10
    for name, rows in (("train.jsonl", qa[n_valid:]), ("valid.jsonl", qa[:n_valid])):
        with open(out / name, "w") as f:
            for q in rows:
                f.write(json.dumps({"id": q["id"], "question": q["question"], "answers": q["answers"],
                                    "provenance": q["provenance"]}) + "\n")

    # Short-answer questions for the faithfulness probe.
    with open(out / "extractive.jsonl", "w") as f:
        for i, t in enumerate(towns[:12]):
            f.write(json.dumps({"id": f"x{i:03d}", "question": f"which region is {t['name']} in?",
                                "answers": [t["region"]], "provenance": [t["id"]]}) + "\n")


if __name__ == "__main__":
    main()
