"""Shared fixtures-by-import for the test modules."""

from __future__ import annotations

import random
from typing import Optional

from mlci.dsl import parse_script
from mlci.evaluator import PredictionSet

# (reliability, eps) -> (F1 none, F1 full, F2 none, F2 full), H = 32
SIZE_TABLE = {
    ("0.99", "0.1"): (404, 1340, 1753, 5496),
    ("0.99", "0.05"): (1615, 5358, 7012, 21984),
    ("0.99", "0.025"): (6457, 21429, 28045, 87933),
    ("0.99", "0.01"): (40355, 133930, 175282, 549581),
    ("0.999", "0.1"): (519, 1455, 2214, 5957),
    ("0.999", "0.05"): (2075, 5818, 8854, 23826),
    ("0.999", "0.025"): (8299, 23271, 35414, 95302),
    ("0.999", "0.01"): (51868, 145443, 221333, 595633),
    ("0.9999", "0.1"): (634, 1570, 2674, 6417),
    ("0.9999", "0.05"): (2536, 6279, 10696, 25668),
    ("0.9999", "0.025"): (10141, 25113, 42782, 102670),
    ("0.9999", "0.01"): (63381, 156956, 267385, 641684),
    ("0.99999", "0.1"): (749, 1685, 3135, 6878),
    ("0.99999", "0.05"): (2996, 6739, 12538, 27510),
    ("0.99999", "0.025"): (11983, 26955, 50150, 110038),
    ("0.99999", "0.01"): (74894, 168469, 313437, 687736),
}


def size_table_cells():
    """Yield (condition, reliability, adaptivity, expected) for all 64 cells."""
    for (rel, eps), (f1n, f1f, f2n, f2f) in SIZE_TABLE.items():
        for cond, none_n, full_n in (
            (f"n > 0.8 +/- {eps}", f1n, f1f),
            (f"n - o > 0.02 +/- {eps}", f2n, f2f),
        ):
            yield cond, rel, "none", none_n
            yield cond, rel, "full", full_n


def script_text(
    condition: str,
    reliability: str = "0.9999",
    mode: str = "fp-free",
    adaptivity: str = "full",
    steps: int = 32,
    first_change_on: Optional[str] = None,
) -> str:
    if adaptivity == "none":
        adaptivity = "none -> ci-results@example.com"
    text = (
        "ml:\n"
        "  - script     : ./test_model.py\n"
        f"  - condition  : {condition}\n"
        f"  - reliability: {reliability}\n"
        f"  - mode       : {mode}\n"
        f"  - adaptivity : {adaptivity}\n"
        f"  - steps      : {steps}\n"
    )
    if first_change_on:
        text += f"  - firstChange_on: {first_change_on}\n"
    return text


def make_script(condition: str, **kw):
    return parse_script(script_text(condition, **kw))


def toy_models(n: int, old_acc: float, new_acc: float, seed: int = 0, prefix: str = "e"):
    """Random binary-label testset with two models of roughly the given accuracies."""
    rng = random.Random(seed)
    ids = [f"{prefix}{i:06d}" for i in range(n)]
    labels = {i: str(rng.randint(0, 1)) for i in ids}

    def model(acc, name):
        return PredictionSet(
            name, {i: labels[i] if rng.random() < acc else str(1 - int(labels[i])) for i in ids}
        )

    return ids, model(old_acc, "old"), model(new_acc, "new"), labels
