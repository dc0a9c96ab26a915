"""Regenerates the bundled fixture corpus and preference file.

    python3 generate.py

Output is deterministic for a given seed.
"""

import json
import random

SEED = 7

SYMPTOMS = [
    ("a headache", "rest in a dark room and drink water", "see a doctor if it lasts over three days"),
    ("a sore throat", "gargle warm salt water twice a day", "see a doctor if you get a high fever"),
    ("a dry cough", "drink warm fluids and try honey tea", "get a chest check if it lasts two weeks"),
    ("back pain", "use gentle heat and keep walking", "avoid lifting heavy things for a week"),
    ("an itchy rash", "use a mild cream and avoid hot showers", "see a skin doctor if it spreads"),
    ("a stomach ache", "eat plain food and sip clear fluids", "seek care if the pain is sharp or constant"),
    ("trouble sleeping", "keep a fixed bedtime and avoid screens", "cut coffee after noon"),
    ("a runny nose", "rest and use a saline spray", "it usually clears within a week"),
    ("knee pain", "ice the knee and rest it", "try light stretching once the swelling drops"),
    ("a mild fever", "rest and drink plenty of fluids", "take paracetamol if you feel unwell"),
    ("dizzy spells", "stand up slowly and drink enough water", "check your blood pressure soon"),
    ("heartburn", "eat smaller meals and avoid late snacks", "raise the head of your bed a little"),
]

DURATIONS = ["since yesterday", "for two days", "for a week", "on and off", "since this morning"]
OPENERS = ["I have", "I have had", "My child has", "I keep getting", "Lately I have"]
FOLLOW_UPS = [
    ("Is there a fever too?", "No fever.", "Good. "),
    ("How bad is it from one to ten?", "About a five.", "That is moderate. "),
    ("Do you take any medicine?", "Nothing yet.", "Then start simple. "),
]


def dialogue(rng, i):
    symptom, advice, extra = rng.choice(SYMPTOMS)
    patient = f"{rng.choice(OPENERS)} {symptom} {rng.choice(DURATIONS)}. What should I do?"
    answer = f"{advice[0].upper()}{advice[1:]}."
    if rng.random() < 0.6:
        answer += f" Also, {extra}."
    turns = [{"role": "patient", "text": patient}]
    if rng.random() < 0.3:
        question, reply, lead = rng.choice(FOLLOW_UPS)
        turns += [{"role": "doctor", "text": question}, {"role": "patient", "text": reply}]
        answer = lead + answer
    turns.append({"role": "doctor", "text": answer})
    return {"id": f"fx-{i:03d}", "source": "fixture", "turns": turns}


def preferences(rng, dialogues, n):
    out = []
    for k in range(n):
        d = dialogues[k % len(dialogues)]
        prompt = d["turns"][0]["text"]
        symptom, advice, extra = rng.choice(SYMPTOMS)
        full = f"{advice[0].upper()}{advice[1:]}. Also, {extra}."
        short = rng.choice(["Rest.", "Drink water.", "Wait and see.", "Ask someone."])
        out.append({
            "prompt": prompt,
            "chosen": full,
            "rejected": short,
            "annotator": f"fixture-{k % 3}",
            "ts": 1700000000 + k,
            "origin": "file",
        })
    return out


def main():
    rng = random.Random(SEED)
    dialogues = [dialogue(rng, i) for i in range(200)]
    with open("corpus.jsonl", "w", encoding="utf-8") as f:
        for d in dialogues:
            f.write(json.dumps(d, ensure_ascii=False) + "\n")
    with open("preferences.jsonl", "w", encoding="utf-8") as f:
        for r in preferences(rng, dialogues, 120):
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


if __name__ == "__main__":
    main()
