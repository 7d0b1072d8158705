"""Regenerate corpus200.tsv and corpus200.embeddings.jsonl.

Five topics of 40 images each, 8-dimensional embeddings around one axis per
topic. Caption embeddings sit next to their image embedding, except for every
25th image, whose caption points the opposite way (a mismatched pair that the
score stage must drop). Two malformed records exercise ingest skipping.
"""
import json
import random

TOPICS = {
    "beach": (["sandy", "sunny", "quiet", "crowded", "rocky"], ["beach", "shoreline", "pier", "lagoon"], ["at sunset", "with surfers", "near palm trees", "in summer"]),
    "kitchen": (["modern", "rustic", "tiny", "bright", "cluttered"], ["kitchen", "pantry", "stove", "bakery counter"], ["with copper pans", "after dinner", "with fresh bread", "in the morning"]),
    "mountain": (["snowy", "misty", "jagged", "green", "distant"], ["mountain", "ridge", "valley", "glacier"], ["under clouds", "with hikers", "at dawn", "above a lake"]),
    "city": (["busy", "neon", "rainy", "empty", "historic"], ["street", "plaza", "subway station", "skyline"], ["at night", "with taxis", "during a parade", "in winter"]),
    "pets": (["sleepy", "playful", "fluffy", "curious", "old"], ["dog", "cat", "puppy", "kitten"], ["on a sofa", "in the garden", "with a ball", "by the window"]),
}

rng = random.Random(20231015)
dim = 8
tsv, side = [], []
n = 0
for t, (topic, (adj, noun, tail)) in enumerate(TOPICS.items()):
    for i in range(40):
        caption = f"a {adj[i % 5]} {noun[(i // 5) % 4]} {tail[(i * 3 + t) % 4]}"
        uri = f"https://images.example/{topic}/{i:03d}.jpg"
        emb = [rng.gauss(0, 0.5) for _ in range(dim)]
        emb[t] += 10.0
        if n % 25 == 24:
            cap = [-x for x in emb]
        else:
            cap = [x + rng.gauss(0, 0.3) for x in emb]
        tsv.append(f"{caption}\t{uri}")
        side.append({"uri": uri, "embedding": [round(x, 4) for x in emb], "caption_embedding": [round(x, 4) for x in cap]})
        n += 1

tsv.insert(17, "a caption without any uri")
tsv.insert(101, "\thttps://images.example/empty-caption.jpg")

with open("corpus200.tsv", "w") as f:
    f.write("\n".join(tsv) + "\n")
with open("corpus200.embeddings.jsonl", "w") as f:
    for rec in side:
        f.write(json.dumps(rec) + "\n")
