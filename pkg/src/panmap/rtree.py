"""Dynamic axis-aligned box index over integer keys (Guttman R-tree).

Used by the tracker to find which live tracks could plausibly overlap a new
detection without scanning every track. Queries always finish with an exact
intersection filter against the authoritative key -> box table, so the tree
only ever acts as a candidate pruner; for tiny populations the tree descent
is skipped entirely in favour of that table.
"""

from __future__ import annotations

import numpy as np

from .geometry import Aabb


def _union(a: Aabb, b: Aabb) -> Aabb:
    return Aabb(np.minimum(a.min, b.min), np.maximum(a.max, b.max))


def _volume(a: Aabb) -> float:
    return float(np.prod(a.max - a.min))


class _Node:
    __slots__ = ("leaf", "entries", "parent")

    def __init__(self, leaf: bool):
        self.leaf = leaf
        self.entries: list[_Entry] = []
        self.parent: _Node | None = None


class _Entry:
    __slots__ = ("aabb", "child", "key")

    def __init__(self, aabb: Aabb, child: _Node | None = None, key: int | None = None):
        self.aabb = aabb
        self.child = child
        self.key = key


def _cover(node: _Node) -> Aabb:
    box = node.entries[0].aabb
    for e in node.entries[1:]:
        box = _union(box, e.aabb)
    return box


class AabbIndex:
    """R-tree with quadratic split and delete-with-condense."""

    def __init__(self, fanout: int = 8, min_fill: int = 4, linear_threshold: int = 16):
        if not (2 <= min_fill <= fanout // 2):
            raise ValueError("require 2 <= min_fill <= fanout / 2")
        self._fanout = fanout
        self._min_fill = min_fill
        self._linear_threshold = linear_threshold
        self._root = _Node(leaf=True)
        self._boxes: dict[int, Aabb] = {}
        self._leaf_of: dict[int, _Node] = {}

    def __len__(self) -> int:
        return len(self._boxes)

    def __contains__(self, key: int) -> bool:
        return key in self._boxes

    def keys(self):
        return self._boxes.keys()

    def aabb_of(self, key: int) -> Aabb:
        return self._boxes[key]

    def insert(self, key: int, aabb: Aabb) -> None:
        if key in self._boxes:
            raise KeyError(f"key {key} already indexed")
        self._boxes[key] = aabb
        self._insert_entry(_Entry(aabb, key=key))

    def remove(self, key: int) -> None:
        leaf = self._leaf_of.pop(key)
        del self._boxes[key]
        leaf.entries = [e for e in leaf.entries if e.key != key]
        self._condense(leaf)

    def update(self, key: int, aabb: Aabb) -> None:
        """Move an existing key to a new box."""
        self.remove(key)
        self.insert(key, aabb)

    def query(self, region: Aabb, margin: float = 0.0) -> list[int]:
        """Sorted keys whose boxes intersect the (optionally inflated) region.

        Exact: candidates from the tree are re-checked against the stored
        boxes, so the answer never depends on tree shape.
        """
        q = region.inflate(margin) if margin else region
        if len(self._boxes) < self._linear_threshold:
            return sorted(k for k, b in self._boxes.items() if b.intersects(q))
        found: list[int] = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            for e in node.entries:
                if e.aabb.intersects(q):
                    if node.leaf:
                        found.append(e.key)
                    else:
                        stack.append(e.child)
        return sorted(k for k in found if self._boxes[k].intersects(q))

    # -- internals ---------------------------------------------------------

    def _insert_entry(self, entry: _Entry) -> None:
        leaf = self._choose_leaf(entry.aabb)
        leaf.entries.append(entry)
        self._leaf_of[entry.key] = leaf
        self._adjust(leaf)

    def _choose_leaf(self, aabb: Aabb) -> _Node:
        node = self._root
        while not node.leaf:
            best = None
            best_rank = None
            for e in node.entries:
                vol = _volume(e.aabb)
                rank = (_volume(_union(e.aabb, aabb)) - vol, vol)
                if best is None or rank < best_rank:
                    best, best_rank = e, rank
            node = best.child
        return node

    def _adjust(self, node: _Node) -> None:
        while node is not None:
            parent = node.parent
            if len(node.entries) > self._fanout:
                right = self._split(node)
                if parent is None:
                    root = _Node(leaf=False)
                    node.parent = right.parent = root
                    root.entries = [
                        _Entry(_cover(node), child=node),
                        _Entry(_cover(right), child=right),
                    ]
                    self._root = root
                    return
                self._entry_for(parent, node).aabb = _cover(node)
                right.parent = parent
                parent.entries.append(_Entry(_cover(right), child=right))
            elif parent is not None:
                self._entry_for(parent, node).aabb = _cover(node)
            node = parent

    @staticmethod
    def _entry_for(parent: _Node, child: _Node) -> _Entry:
        for e in parent.entries:
            if e.child is child:
                return e
        raise AssertionError("child entry missing from parent")

    def _split(self, node: _Node) -> _Node:
        """Quadratic split: redistribute into node (left) and a new right node."""
        entries = node.entries
        si, sj = self._pick_seeds(entries)
        g1, g2 = [entries[si]], [entries[sj]]
        box1, box2 = entries[si].aabb, entries[sj].aabb
        rest = [e for t, e in enumerate(entries) if t not in (si, sj)]
        while rest:
            if len(g1) + len(rest) == self._min_fill:
                g1 += rest
                break
            if len(g2) + len(rest) == self._min_fill:
                g2 += rest
                break
            # Take the entry with the strongest preference between groups.
            pick, to_g1 = None, True
            best_diff = -1.0
            for t, e in enumerate(rest):
                d1 = _volume(_union(box1, e.aabb)) - _volume(box1)
                d2 = _volume(_union(box2, e.aabb)) - _volume(box2)
                diff = abs(d1 - d2)
                if diff > best_diff:
                    best_diff = diff
                    pick = t
                    if d1 != d2:
                        to_g1 = d1 < d2
                    elif _volume(box1) != _volume(box2):
                        to_g1 = _volume(box1) < _volume(box2)
                    else:
                        to_g1 = len(g1) <= len(g2)
            e = rest.pop(pick)
            if to_g1:
                g1.append(e)
                box1 = _union(box1, e.aabb)
            else:
                g2.append(e)
                box2 = _union(box2, e.aabb)
        node.entries = g1
        right = _Node(leaf=node.leaf)
        right.entries = g2
        for e in g2:
            if node.leaf:
                self._leaf_of[e.key] = right
            else:
                e.child.parent = right
        return right

    @staticmethod
    def _pick_seeds(entries: list[_Entry]) -> tuple[int, int]:
        best, best_d = (0, 1), -np.inf
        for i in range(len(entries)):
            vi = _volume(entries[i].aabb)
            for j in range(i + 1, len(entries)):
                d = _volume(_union(entries[i].aabb, entries[j].aabb)) - vi - _volume(entries[j].aabb)
                if d > best_d:
                    best_d, best = d, (i, j)
        return best

    def _condense(self, node: _Node) -> None:
        orphans: list[_Entry] = []
        while node is not self._root:
            parent = node.parent
            if len(node.entries) < self._min_fill:
                parent.entries = [e for e in parent.entries if e.child is not node]
                self._collect_leaf_entries(node, orphans)
            else:
                self._entry_for(parent, node).aabb = _cover(node)
            node = parent
        while not self._root.leaf and len(self._root.entries) == 1:
            self._root = self._root.entries[0].child
            self._root.parent = None
        if not self._root.leaf and not self._root.entries:
            self._root = _Node(leaf=True)
        for e in orphans:
            self._insert_entry(e)

    @staticmethod
    def _collect_leaf_entries(node: _Node, out: list[_Entry]) -> None:
        if node.leaf:
            out.extend(node.entries)
            return
        for e in node.entries:
            AabbIndex._collect_leaf_entries(e.child, out)
