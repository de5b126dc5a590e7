"""A rule-based LLM that answers director and benchmark stages from a world file.

The world file is JSON describing the ground truth a perfect director would
produce: subjects (with portrait prompts, descriptors, type tokens) and scene
prompts. Stage requests are recognised by the ``[stage: ...]`` tag the
template registry puts at the top of every system message.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path
from typing import Sequence

from .base import Message

_NAMES = [
    "Aria", "Bruno", "Cleo", "Dario", "Elsa", "Finn", "Greta", "Hugo", "Iris", "Jonah",
    "Kira", "Leo", "Maya", "Nico", "Olga", "Paco", "Quinn", "Rosa", "Sami", "Tess",
    "Udo", "Vera", "Wren", "Xavi", "Yara", "Zane", "Anouk", "Bela", "Cyrus", "Dana",
    "Emil", "Fleur", "Gus", "Hana", "Ivo", "Jade", "Kurt", "Lina", "Milo", "Nell",
]
_KINDS = [
    ("man", "man in a grey trench coat", "a tall middle-aged man with a trimmed beard, grey trench coat and black leather shoes"),
    ("woman", "woman with a red scarf", "a young woman with long auburn hair, a knitted red scarf and a navy wool coat"),
    ("girl", "girl in a yellow raincoat", "a seven year old girl with two brown pigtails, a yellow raincoat and green rubber boots"),
    ("boy", "boy with round glasses", "a ten year old boy with curly black hair, round glasses and a striped blue sweater"),
    ("dog", "spotted dalmatian dog", "a friendly dalmatian dog with black spots, a red leather collar and floppy ears"),
    ("cat", "fluffy white cat", "a fluffy white persian cat with bright green eyes and a small silver bell"),
    ("robot", "small copper robot", "a small copper robot with round lamp eyes, riveted joints and a little antenna"),
    ("bear", "brown bear in overalls", "a large brown bear wearing blue denim overalls and a straw hat"),
]
_DETAILS = [
    "standing in soft daylight",
    "with a small leather satchel",
    "wearing a silver pendant",
    "with a bright orange backpack",
    "holding a wooden walking stick",
]
_ACTIONS_1 = [
    "walks along a foggy harbour at dawn",
    "reads a book under a blossoming cherry tree",
    "stands on a snowy mountain ridge at sunset",
    "explores a glowing crystal cave",
]
_ACTIONS_N = [
    "share a picnic beside a calm lake at noon",
    "walk together through a busy night market",
    "sit around a campfire in a pine forest",
    "ride a small boat across a misty river",
]
_LANDSCAPES = [
    "A quiet desert canyon glowing orange under a setting sun",
    "An empty cobblestone street after the rain, lit by old lanterns",
    "A wide field of sunflowers beneath a clear blue summer sky",
    "A frozen lake surrounded by snowy pine trees at first light",
]

_STAGE = re.compile(r"^\[stage: ([a-z_]+)\]")


def _pick(options: Sequence[str], *key) -> str:
    h = int(hashlib.sha256("|".join(map(str, key)).encode()).hexdigest()[:8], 16)
    return options[h % len(options)]


def _mentions(text: str, name: str) -> bool:
    return re.search(r"(?<!\w)" + re.escape(name) + r"(?!\w)", text) is not None


def synthetic_subject(i: int) -> dict:
    name = _NAMES[i % len(_NAMES)] + ("" if i < len(_NAMES) else str(i // len(_NAMES)))
    token, desc, portrait = _KINDS[i % len(_KINDS)]
    round_ = i // len(_KINDS)
    if round_:
        portrait = f"{portrait}, {_DETAILS[(round_ - 1) % len(_DETAILS)]}"
        if round_ > len(_DETAILS):
            portrait += f", variant {round_}"
    return {"name": name, "portrait_prompt": portrait, "short_descriptor": desc, "type_token": token}


class FixtureDirectorLLM:
    def __init__(self, world: dict | None = None, model_id: str = "fixture-director"):
        self.world = world or {}
        self.model_id = self.world.get("model_id", model_id)
        self._subjects = {s["name"]: s for s in self.world.get("subjects", [])}

    @classmethod
    def from_file(cls, path: str | Path) -> "FixtureDirectorLLM":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, messages: Sequence[Message]) -> str:
        stage = None
        payload = {}
        for role, text in messages:
            if role == "system" and stage is None:
                m = _STAGE.match(text)
                stage = m.group(1) if m else None
            if role == "user" and "INPUT: " in text and not payload:
                payload = json.loads(text.split("INPUT: ", 1)[1].strip())
        handler = getattr(self, f"_stage_{stage}", None)
        if handler is None:
            return "I am not sure what you are asking."
        return json.dumps(handler(payload), ensure_ascii=False)

    # --- director stages ---------------------------------------------------

    def _stage_subjects(self, p):
        names = list(self._subjects)[: p.get("max_subjects", len(self._subjects))]
        if not names:
            return {"subjects": [], "no_characters": True}
        return {"subjects": [{"name": n} for n in names]}

    def _subject(self, name):
        if name in self._subjects:
            return self._subjects[name]
        idx = int(hashlib.sha256(name.encode()).hexdigest()[:8], 16) % len(_KINDS)
        return {**synthetic_subject(idx), "name": name}

    def _stage_subject_portrait(self, p):
        s = self._subject(p["name"])
        return {"portrait_prompt": s["portrait_prompt"], "style_tags": s.get("style_tags", [])}

    def _stage_subject_descriptor(self, p):
        s = self._subject(p["name"])
        return {"short_descriptor": s["short_descriptor"], "type_token": s["type_token"]}

    def _stage_scenes(self, p):
        scenes = list(self.world.get("scenes", []))
        n = p.get("n_scenes") or len(scenes)
        out = []
        for i in range(n):
            base = scenes[i % len(scenes)] if scenes else _pick(_LANDSCAPES, i)
            out.append(base if i < len(scenes) else f"{base}, once more")
        return {"scenes": out}

    def _stage_scene_shorten(self, p):
        words = p["prompt"].split()
        return {"prompt": " ".join(words[: p["word_limit"]])}

    def _stage_presence(self, p):
        overrides = self.world.get("presence", {})
        if p["scene"] in overrides:
            return {"present": p["name"] in overrides[p["scene"]]}
        return {"present": _mentions(p["scene"], p["name"])}

    def _stage_rewrite(self, p):
        text = p["scene"]
        for s in p["subjects"]:
            text = re.sub(r"(?<!\w)" + re.escape(s["name"]) + r"(?!\w)", s["short_descriptor"], text)
        return {"prompt": text}

    # --- benchmark stages --------------------------------------------------

    def _stage_pool(self, p):
        avoid = set(p.get("avoid", []))
        source = self.world.get("pool")
        out = []
        i = 0
        while len(out) < p["n"]:
            cand = source[i] if source and i < len(source) else synthetic_subject(i)
            if source and i >= len(source) and not self.world.get("pool_extend", True):
                break
            if cand["name"] not in avoid:
                out.append(cand)
                avoid.add(cand["name"])
            i += 1
        # an exhausted world repeats itself, like a real model running out of ideas
        return {"subjects": out or list(source[:1])}

    def _stage_case(self, p):
        names = [s["name"] for s in p["subjects"]]
        if not names:
            return {"prompt": _pick(_LANDSCAPES, "k0", p.get("case_id", ""))}
        if len(names) == 1:
            return {"prompt": f"{names[0]} {_pick(_ACTIONS_1, names[0], p.get('case_id', ''))}"}
        people = ", ".join(names[:-1]) + f" and {names[-1]}"
        return {"prompt": f"{people} {_pick(_ACTIONS_N, *names, p.get('case_id', ''))}"}
