"""Regenerate seed12.jsonl: twelve approved examples whose label mix admits
exactly sixteen constraint-satisfying triples."""
import json

IC, CMP, INT, EXT = "ImageCreation", "ImageComparison", "IntrinsicImageUnderstanding", "ExtrinsicImageUnderstanding"
LABELS = [
    ("Excellent", [IC, CMP]), ("Excellent", [INT]), ("Satisfactory", [EXT]), ("Satisfactory", [IC]),
    ("Satisfactory", [CMP]), ("Satisfactory", [INT]), ("Satisfactory", [CMP]), ("Satisfactory", [INT]),
    ("Satisfactory", [IC]), ("Satisfactory", [EXT, INT]), ("Excellent", [CMP]), ("Satisfactory", [IC]),
]
SUBJECTS = ["a lighthouse on a cliff", "two bowls of ramen", "a red vintage car", "a field of sunflowers",
            "a cat asleep on a keyboard", "an old stone bridge", "a crowded night market", "a snowy cabin",
            "a child flying a kite", "a bowl of fresh cherries", "a sailboat at dawn", "a robot toy on a desk"]


def text(s):
    return {"type": "text", "content": s}


def image(i, d):
    return {"type": "image_ref", "index": i, "description": d}


with open("seed12.jsonl", "w") as f:
    for k, ((quality, chars), subject) in enumerate(zip(LABELS, SUBJECTS)):
        conv = {
            "id": f"seed-{k:02d}",
            "turns": [
                {"instruction": [text("Can you show me " + subject + "?")],
                 "response": [text("Here it is: "), image(0, subject), text(" What would you like to know about it?")]},
                {"instruction": [text("What stands out to you?")],
                 "response": [text("The composition draws the eye to the centre of the frame.")]},
            ],
            "roster": {"0": {"image_id": f"seed-img-{k:02d}", "uri": f"https://images.example/seed/{k:02d}.jpg", "caption": subject}},
            "provenance": {"prompt_fingerprint": "", "generated_at": "2023-01-01T00:00:00Z"},
        }
        rec = {"conversation": conv, "quality": quality, "characteristics": sorted(chars), "annotator": "fixture", "iteration": 0}
        f.write(json.dumps(rec) + "\n")
