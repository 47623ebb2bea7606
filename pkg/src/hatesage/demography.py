"""Per-user group labels from per-message dialect posteriors."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "CATEGORIES",
    "read_posteriors",
    "average_posteriors",
    "read_overrides",
    "GroupAssignment",
    "label_group",
    "write_groups",
    "read_groups",
]

CATEGORIES = ("p_white", "p_black", "p_hispanic", "p_asian")
BLACK = 1


def read_posteriors(path: str | os.PathLike, tol: float = 1e-6) -> list[tuple[int, str, np.ndarray]]:
    """Rows of (user id, message id, 4-vector); vectors must sum to 1."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("user_id", "message_id", *CATEGORIES) if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                p = np.array([float(rec[c]) for c in CATEGORIES])
                uid = int(rec["user_id"])
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: malformed row") from None
            if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1) > tol:
                raise ValueError(f"{path}:{lineno}: probabilities must lie in [0,1] and sum to 1")
            rows.append((uid, rec["message_id"], p))
    return rows


def average_posteriors(rows: Iterable[tuple[int, str, np.ndarray]], users: Iterable[int] | None = None) -> dict[int, np.ndarray]:
    """Unweighted mean vector per user.

    If ``users`` is given, every listed user must have at least one row.
    """
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for uid, _, p in rows:
        p = np.asarray(p, dtype=np.float64)
        sums[uid] = sums.get(uid, 0) + p
        counts[uid] = counts.get(uid, 0) + 1
    if users is not None:
        empty = sorted(set(users) - set(sums))
        if empty:
            raise ValueError(f"users without posterior rows: {empty}")
    return {u: sums[u] / counts[u] for u in sums}


def read_overrides(path: str | os.PathLike) -> tuple[list[int], list[int]]:
    """Parse ``[removals]`` / ``[additions]`` sections of user ids."""
    removals: list[int] = []
    additions: list[int] = []
    section = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key = line.strip("[]:").lower()
            if key in ("removals", "additions"):
                section = removals if key == "removals" else additions
                continue
            if section is None:
                raise ValueError(f"{path}:{lineno}: user id outside a section")
            try:
                section.append(int(line))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad user id {line!r}") from None
    return removals, additions


@dataclass
class GroupAssignment:
    groups: dict[int, str]
    provenance: dict[int, str] = field(default_factory=dict)

    @property
    def protected(self) -> set[int]:
        return {u for u, g in self.groups.items() if g == "protected"}


def label_group(
    means: Mapping[int, np.ndarray],
    category: int = BLACK,
    threshold: float = 0.8,
    removals: Iterable[int] = (),
    additions: Iterable[int] = (),
) -> GroupAssignment:
    """Protected iff the category's mean exceeds ``threshold`` (strictly),
    then removals and additions are applied in that order."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    removals, additions = set(removals), set(additions)
    unknown = sorted((removals | additions) - set(means))
    if unknown:
        raise ValueError(f"overrides reference unknown users {unknown}")
    both = sorted(removals & additions)
    if both:
        raise ValueError(f"users both removed and added: {both}")
    groups, prov = {}, {}
    for u, m in means.items():
        hit = bool(np.asarray(m)[category] > threshold)
        groups[u] = "protected" if hit else "other"
        prov[u] = "model"
    for u in removals:
        groups[u] = "other"
        prov[u] = "override-removed"
    for u in additions:
        groups[u] = "protected"
        prov[u] = "override-added"
    return GroupAssignment(groups, prov)


def write_groups(path, assignment: GroupAssignment, protected_tag: str = "AA", other_tag: str = "other") -> None:
    with open(path, "w") as fh:
        fh.write("node_id,group,provenance\n")
        for u in sorted(assignment.groups):
            tag = protected_tag if assignment.groups[u] == "protected" else other_tag
            fh.write(f"{u},{tag},{assignment.provenance.get(u, 'model')}\n")


def read_groups(path) -> dict[int, str]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "node_id" not in reader.fieldnames or "group" not in reader.fieldnames:
            raise ValueError(f"{path}: need node_id and group columns")
        for lineno, rec in enumerate(reader, start=2):
            try:
                out[int(rec["node_id"])] = rec["group"].strip()
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad node id") from None
    return out
