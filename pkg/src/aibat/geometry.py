"""Polyline simplification and binary-image contour tracing."""

from __future__ import annotations

import math

import numpy as np

Point = tuple[float, float]


def point_segment_distance(p: Point, a: Point, b: Point) -> float:
    """Euclidean distance from p to the segment a-b (not the infinite line)."""
    px, py = p
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    seg_len2 = dx * dx + dy * dy
    if seg_len2 == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / seg_len2
    t = max(0.0, min(1.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))


def rdp_simplify(points: list[Point], epsilon: float) -> list[Point]:
    """Ramer-Douglas-Peucker simplification of an open polyline.

    Keeps both endpoints; recursively keeps the farthest point of any span
    whose deviation from the chord exceeds epsilon. Distances are measured
    to the chord segment, so every discarded point ends up within epsilon
    of the simplified chain.
    """
    if len(points) < 2:
        raise ValueError("need >= 2 points")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    keep = [False] * len(points)
    keep[0] = keep[-1] = True
    stack = [(0, len(points) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        a, b = points[lo], points[hi]
        dmax, imax = -1.0, -1
        for i in range(lo + 1, hi):
            d = point_segment_distance(points[i], a, b)
            if d > dmax:
                dmax, imax = d, i
        if dmax > epsilon:
            keep[imax] = True
            stack.append((lo, imax))
            stack.append((imax, hi))
    return [p for p, k in zip(points, keep) if k]


def simplify_closed_contour(points: list[Point], epsilon: float) -> list[Point]:
    """Simplify a closed contour to its polygon vertices.

    The ring is split at an approximate diameter pair (double farthest-point
    sweep) so the split points land on true corners, then each open chain is
    simplified independently.
    """
    n = len(points)
    if n < 3:
        return list(points)
    ia = _farthest_from(points, points[0])
    ib = _farthest_from(points, points[ia])
    ia, ib = min(ia, ib), max(ia, ib)
    if ia == ib:
        return [points[ia]]
    chain1 = points[ia : ib + 1]
    chain2 = points[ib:] + points[: ia + 1]
    simple1 = rdp_simplify(chain1, epsilon)
    simple2 = rdp_simplify(chain2, epsilon)
    return simple1 + simple2[1:-1]


def _farthest_from(points: list[Point], origin: Point) -> int:
    ox, oy = origin
    best, best_d = 0, -1.0
    for i, (x, y) in enumerate(points):
        d = (x - ox) ** 2 + (y - oy) ** 2
        if d > best_d:
            best, best_d = i, d
    return best


# Moore neighborhood offsets, clockwise on screen coordinates, starting west.
_MOORE = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)]
_MOORE_INDEX = {off: i for i, off in enumerate(_MOORE)}


def trace_outer_contour(mask: np.ndarray) -> list[Point]:
    """Outer boundary of the single component in mask, by Moore-neighbor tracing.

    mask is a boolean array holding one 8-connected component. Returns the
    closed boundary pixel path as (x, y) points; the start point is not
    repeated at the end. Pixels of one-pixel-wide strokes can appear twice,
    once per side, which is what a boundary walk should produce.
    """
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return []
    first = np.lexsort((xs, ys))[0]  # topmost, then leftmost
    start = (int(xs[first]), int(ys[first]))
    h, w = mask.shape

    def is_ink(x: int, y: int) -> bool:
        return 0 <= x < w and 0 <= y < h and bool(mask[y, x])

    contour: list[Point] = [start]
    p = start
    back = 0  # start pixel entered from its white west neighbor
    cap = 4 * h * w + 8
    while cap > 0:
        cap -= 1
        hit = None
        for step in range(1, 9):
            d = (back + step) % 8
            nx, ny = p[0] + _MOORE[d][0], p[1] + _MOORE[d][1]
            if is_ink(nx, ny):
                hit = (d, (nx, ny))
                break
        if hit is None:
            return contour  # isolated pixel
        d, nxt = hit
        white = (p[0] + _MOORE[(d - 1) % 8][0], p[1] + _MOORE[(d - 1) % 8][1])
        back = _MOORE_INDEX[(white[0] - nxt[0], white[1] - nxt[1])]
        p = nxt
        # Jacob's criterion: back at the start in the starting configuration.
        if p == start and back == 0:
            return contour
        contour.append(p)
    return contour


def contour_perimeter(points: list[Point]) -> float:
    """Length of the closed path through the points."""
    if len(points) < 2:
        return 0.0
    total = 0.0
    for i in range(len(points)):
        x0, y0 = points[i]
        x1, y1 = points[(i + 1) % len(points)]
        total += math.hypot(x1 - x0, y1 - y0)
    return total
