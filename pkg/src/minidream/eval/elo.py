"""Elo ratings from pairwise forced-choice logs and Likert score aggregation."""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Mapping

INITIAL_RATING = 1000.0
K_FACTOR = 32.0


def expected_score(r_a: float, r_b: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((r_b - r_a) / 400.0))


def _field(record, name: str):
    if isinstance(record, Mapping):
        return record[name]
    return getattr(record, name)


def players(record) -> tuple[str, str, str]:
    """(model_a, model_b, winner_model). ``winner`` may be 'a'/'b' or a model id."""
    a, b = str(_field(record, "source_a")), str(_field(record, "source_b"))
    if a == b:
        raise ValueError(f"a model cannot play itself ({a!r})")
    w = str(_field(record, "winner"))
    if w in (a, b):
        return a, b, w
    if w == "a":
        return a, b, a
    if w == "b":
        return a, b, b
    raise ValueError(f"winner {w!r} is neither {a!r} nor {b!r}")


def elo_update(table: Mapping[str, float], record, k: float = K_FACTOR) -> dict[str, float]:
    """New table after one comparison; unseen models enter at the initial rating."""
    a, b, w = players(record)
    out = dict(table)
    r_a, r_b = out.setdefault(a, INITIAL_RATING), out.setdefault(b, INITIAL_RATING)
    e_a = expected_score(r_a, r_b)
    s_a = 1.0 if w == a else 0.0
    # S_b - E_b = -(S_a - E_a): one delta keeps the pair's rating sum fixed
    delta = k * (s_a - e_a)
    out[a] = r_a + delta
    out[b] = r_b - delta
    return out


def elo_ratings(records: Iterable, k: float = K_FACTOR, table: Mapping[str, float] | None = None) -> dict[str, float]:
    out = dict(table or {})
    for rec in records:
        out = elo_update(out, rec, k)
    return out


def standings(table: Mapping[str, float]) -> list[tuple[str, float]]:
    """Models by descending rating, ties by name."""
    return sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))


def read_log(path: str | Path) -> list[dict]:
    out = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{i + 1}: {e.msg}") from e
    return out


def likert_aggregate(scores: Iterable[tuple[str, str, str, float]]) -> dict[str, float]:
    """Unweighted mean per model over (model, reviewer, item, score) rows; scores must lie in [1, 5]."""
    total: dict[str, float] = defaultdict(float)
    count: dict[str, int] = defaultdict(int)
    for model, _reviewer, _item, score in scores:
        s = float(score)
        if not 1.0 <= s <= 5.0:
            raise ValueError(f"Likert score {score!r} outside [1, 5]")
        total[model] += s
        count[model] += 1
    return {m: total[m] / count[m] for m in sorted(total)}
