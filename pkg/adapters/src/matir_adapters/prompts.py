"""Prompt construction for the scorer/grounder and box-output parsing."""

from __future__ import annotations

import json
import math
import re

RELEVANCE_QUESTION = "Does this image contain the described object? Answer True or False."
GROUNDING_INSTRUCTION = "Locate the described object, output the bbox coordinates in JSON format."

ANSWER_TOKENS = ("True", "False")

_FENCE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_BOX_KEYS = ("bbox_2d", "bbox", "box")


def relevance_prompt(object_text: str) -> str:
    return f"{RELEVANCE_QUESTION}\nObject description: {object_text}"


def grounding_prompt(object_text: str) -> str:
    return f"{GROUNDING_INSTRUCTION}\nObject description: {object_text}"


def _as_box(candidate) -> list[float] | None:
    if isinstance(candidate, dict):
        for key in _BOX_KEYS:
            if key in candidate:
                candidate = candidate[key]
                break
        else:
            return None
    if not isinstance(candidate, (list, tuple)) or len(candidate) != 4:
        return None
    try:
        box = [float(v) for v in candidate]
    except (TypeError, ValueError):
        return None
    if not all(math.isfinite(v) for v in box):
        return None
    return box


def parse_grounding_boxes(text: str) -> list[list[float]]:
    """Extract [x1, y1, x2, y2] boxes from a model's free-form reply.

    Accepts a fenced or bare JSON payload shaped as a box, a dict with a
    box field, or a list of either. Anything unparseable yields [].
    """
    fenced = _FENCE.search(text)
    payload = fenced.group(1) if fenced else text
    payload = payload.strip()
    obj = None
    try:
        obj = json.loads(payload)
    except json.JSONDecodeError:
        start = payload.find("[")
        end = payload.rfind("]")
        if start != -1 and end > start:
            try:
                obj = json.loads(payload[start:end + 1])
            except json.JSONDecodeError:
                return []
    if obj is None:
        return []

    single = _as_box(obj)
    if single is not None:
        return [single]
    if isinstance(obj, list):
        boxes = []
        for item in obj:
            box = _as_box(item)
            if box is not None:
                boxes.append(box)
        return boxes
    return []
