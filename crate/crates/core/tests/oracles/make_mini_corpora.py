"""Writes miniature corpora in the published RAWFC and LIAR-RAW layouts,
plus expected.json with counts computed here, independently of the Rust
ingest code.

Reports carry pre-split sentences (`tokenized`), except a few that only have
`content` made of plainly delimited sentences, counted by a naive split.
Blank tokenized entries are written on purpose and are not counted.

Run from the repository root:
    python3 crates/core/tests/oracles/make_mini_corpora.py
"""
import json
import os
import random
import re

ROOT = os.path.join(os.path.dirname(__file__), "..", "fixtures")
WORDS = "tax budget border vaccine wages tariffs pension climate crime housing".split()


def sentence(rng):
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(3, 8))).capitalize() + "."


def report(rng, rid, i):
    if i % 7 == 3:
        n = rng.randint(2, 4)
        content = " ".join(sentence(rng) for _ in range(n))
        return {"report_id": rid, "content": content}, len(re.findall(r"\.(?:\s|$)", content))
    n = rng.randint(1, 6)
    sents = [{"sent": sentence(rng), "is_evidence": rng.randint(0, 1)} for _ in range(n)]
    if i % 5 == 0:
        sents.insert(1, {"sent": "   ", "is_evidence": 0})
    return {"report_id": rid, "content": "", "tokenized": sents}, n


def claim(rng, cid, label, counter, no_reports=False):
    reports, n_sent = [], 0
    for r in range(0 if no_reports else rng.randint(1, 4)):
        rep, n = report(rng, f"{cid}-r{r}", counter[0])
        counter[0] += 1
        reports.append(rep)
        n_sent += n
    obj = {"event_id": cid, "claim": sentence(rng), "label": label, "explain": "", "reports": reports}
    return obj, len(reports), n_sent


def build(name, labels, sizes, seed, writer):
    rng = random.Random(seed)
    counter = [0]
    expected = {"splits": {}, "labels": {}}
    for split, n in sizes.items():
        records, n_rep, n_sent = [], 0, 0
        for i in range(n):
            label = labels[(i + len(split)) % len(labels)]
            obj, r, s = claim(rng, f"{name}-{split}-{i}", label, counter, no_reports=(split == "val" and i == 0))
            records.append(obj)
            n_rep += r
            n_sent += s
            key = {"half": "half-true", "pants-on-fire": "pants-fire"}.get(label, label)
            expected["labels"][key] = expected["labels"].get(key, 0) + 1
        writer(split, records)
        expected["splits"][split] = {"claims": n, "reports": n_rep, "sentences": n_sent}
    with open(os.path.join(ROOT, name, "expected.json"), "w") as f:
        json.dump(expected, f, indent=2, sort_keys=True)
        f.write("\n")


def rawfc_writer(split, records):
    d = os.path.join(ROOT, "mini_rawfc", split)
    os.makedirs(d, exist_ok=True)
    for r in records:
        with open(os.path.join(d, r["event_id"] + ".json"), "w") as f:
            json.dump(r, f, indent=1)


def liar_writer(split, records):
    d = os.path.join(ROOT, "mini_liar")
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, split + ".json"), "w") as f:
        json.dump(records, f, indent=1)


if __name__ == "__main__":
    os.makedirs(os.path.join(ROOT, "mini_rawfc"), exist_ok=True)
    build("mini_rawfc", ["false", "half", "true"], {"train": 9, "val": 3, "test": 4}, 1, rawfc_writer)
    build(
        "mini_liar",
        ["pants-fire", "false", "barely-true", "half-true", "mostly-true", "true"],
        {"train": 12, "val": 4, "test": 5},
        2,
        liar_writer,
    )
