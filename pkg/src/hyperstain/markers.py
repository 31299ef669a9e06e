"""Marker vocabulary and ordered marker sets.

The vocabulary is the global name<->index map shared by every cohort;
marker sets are ordered index tuples referencing it.  Order matters:
channel layouts and generated kernels follow set order.
"""

from __future__ import annotations

from .errors import VocabularyError


class MarkerVocabulary:
    """Ordered, gap-free name<->index map for all known markers."""

    def __init__(self, names):
        names = list(names)
        if len(set(names)) != len(names):
            raise ValueError("duplicate marker names in vocabulary")
        self.names = names
        self.index = {name: i for i, name in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index

    def __eq__(self, other):
        return isinstance(other, MarkerVocabulary) and self.names == other.names

    def index_of(self, name):
        try:
            return self.index[name]
        except KeyError:
            raise VocabularyError(f"unknown marker {name!r}") from None

    def name_of(self, idx):
        if not 0 <= idx < len(self.names):
            raise VocabularyError(f"marker index {idx} out of range (N={len(self.names)})")
        return self.names[idx]

    def set_of(self, names):
        """Build an ordered MarkerSet from marker names."""
        return MarkerSet(self.index_of(n) for n in names)


class MarkerSet:
    """Ordered, duplicate-free tuple of vocabulary indices."""

    __slots__ = ("markers",)

    def __init__(self, markers):
        ms = tuple(int(m) for m in markers)
        if len(set(ms)) != len(ms):
            raise ValueError("duplicate markers in set")
        if any(m < 0 for m in ms):
            raise ValueError("marker indices must be non-negative")
        self.markers = ms

    def __len__(self):
        return len(self.markers)

    def __iter__(self):
        return iter(self.markers)

    def __getitem__(self, i):
        return self.markers[i]

    def __eq__(self, other):
        return isinstance(other, MarkerSet) and self.markers == other.markers

    def __hash__(self):
        return hash(self.markers)

    def __repr__(self):
        return f"MarkerSet{self.markers}"

    def __contains__(self, idx):
        return idx in self.markers

    def issubset(self, other):
        return set(self.markers) <= set(other.markers)

    def without(self, idx):
        """Copy of this set with one marker removed (order preserved)."""
        if idx not in self.markers:
            raise ValueError(f"marker {idx} not in set")
        return MarkerSet(m for m in self.markers if m != idx)

    def positions_in(self, panel):
        """Channel positions of this set's markers inside ``panel``'s order."""
        lut = {m: i for i, m in enumerate(panel.markers)}
        try:
            return [lut[m] for m in self.markers]
        except KeyError as exc:
            raise ValueError(f"marker {exc.args[0]} not in panel") from None
