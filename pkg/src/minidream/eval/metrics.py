"""Edit distance, text accuracy rate R_a and text hit rate R_h."""
from __future__ import annotations


def _align(a: str, b: str) -> tuple[int, int]:
    """(edit distance, max matched characters among minimum-cost alignments)."""
    m, n = len(a), len(b)
    # each cell holds (cost, -matches); lexicographic min prefers more matches on cost ties
    prev = [(j, 0) for j in range(n + 1)]
    for i in range(1, m + 1):
        cur = [(i, 0)] + [(0, 0)] * n
        for j in range(1, n + 1):
            same = a[i - 1] == b[j - 1]
            diag = (prev[j - 1][0] + (0 if same else 1), prev[j - 1][1] - (1 if same else 0))
            up = (prev[j][0] + 1, prev[j][1])
            left = (cur[j - 1][0] + 1, cur[j - 1][1])
            cur[j] = min(diag, up, left)
        prev = cur
    cost, neg_matches = prev[n]
    return cost, -neg_matches


def levenshtein(a: str, b: str) -> int:
    """Unit-cost insert/delete/substitute distance."""
    return _align(a, b)[0]


def matched_chars(rendered: str, target: str) -> int:
    """N_c: equal-character pairs in an optimal alignment, ties broken toward more matches."""
    return _align(rendered, target)[1]


def text_accuracy(rendered: str, target: str) -> float:
    """R_a = (1 - N_e / N) * 100, N = len(target). Negative when N_e > N."""
    if not target:
        raise ValueError("target text must be nonempty")
    return (1.0 - levenshtein(rendered, target) / len(target)) * 100.0


def text_hit_rate(rendered: str, target: str) -> float:
    """R_h = N_c / N * 100."""
    if not target:
        raise ValueError("target text must be nonempty")
    return matched_chars(rendered, target) / len(target) * 100.0
