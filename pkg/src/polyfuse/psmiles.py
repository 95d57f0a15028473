"""PSMILES parsing, validation, capping, tokenization, and token merging.

A PSMILES string is a SMILES repeat unit with exactly two ``[*]``
connection points.  The tokenizer here is chemically aware (atom-level,
longest match); subword splits produced by external text models are
reconciled against it with ``build_merge_map``, which aligns a raw token
sequence to a target sequence by byte spans and supports fractional
membership when one raw token straddles two targets.

Merging conventions: embedding vectors are combined by weighted MEAN,
attribution scores by weighted SUM (so per-polymer score totals are
preserved under any regrouping).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError

CONNECTION = "[*]"

# Two-letter organic-subset elements recognized without brackets.
_TWO_LETTER = ("Cl", "Br")
_ORGANIC = set("BCNOPSFI")
_AROMATIC = set("bcnosp")
_BONDS = set("-=#:/\\")


class PsmilesError(DataError):
    """Invalid PSMILES input where a valid one is required."""


class TokenKind(Enum):
    CONNECTION_POINT = "connection_point"
    ATOM = "atom"
    AROMATIC_ATOM = "aromatic_atom"
    BRACKET_ATOM = "bracket_atom"
    BOND = "bond"
    BRANCH = "branch"
    RING_DIGIT = "ring_digit"


@dataclass(frozen=True)
class Token:
    text: str
    span: tuple[int, int]  # half-open byte range into the source (ASCII, so byte == char)
    kind: TokenKind


@dataclass(frozen=True)
class MergeMap:
    """Partition of raw-token indices into refined-token groups.

    Each group is a tuple of (raw_index, weight) pairs in source order.
    Weights are the fraction of the raw token's bytes covered by the
    group, so the weights of any raw index sum to 1 across groups.
    """

    groups: tuple[tuple[tuple[int, float], ...], ...]

    def is_identity(self) -> bool:
        return all(
            len(g) == 1 and g[0] == (i, 1.0) for i, g in enumerate(self.groups)
        )


def validate(s: str) -> list[str]:
    """Return all invariant violations for a PSMILES string (empty = valid).

    Checks: exactly two "[*]" connection points, balanced parentheses
    and brackets, and an even occurrence count for every ring-bond digit
    (single digits and %NN labels outside bracket atoms).
    """
    violations: list[str] = []

    stars = s.count(CONNECTION)
    if stars != 2:
        violations.append(f"expected exactly 2 connection points [*], found {stars}")

    depth_paren = 0
    depth_bracket = 0
    ring_counts: dict[str, int] = {}
    i = 0
    while i < len(s):
        ch = s[i]
        if ch == "(":
            depth_paren += 1
        elif ch == ")":
            depth_paren -= 1
            if depth_paren < 0:
                violations.append(f"unbalanced parenthesis: ')' at offset {i} has no matching '('")
                depth_paren = 0
        elif ch == "[":
            depth_bracket += 1
        elif ch == "]":
            depth_bracket -= 1
            if depth_bracket < 0:
                violations.append(f"unbalanced bracket: ']' at offset {i} has no matching '['")
                depth_bracket = 0
        elif depth_bracket == 0:
            if ch == "%" and i + 2 < len(s) and s[i + 1].isdigit() and s[i + 2].isdigit():
                label = s[i + 1 : i + 3]
                ring_counts[label] = ring_counts.get(label, 0) + 1
                i += 3
                continue
            if ch.isdigit():
                ring_counts[ch] = ring_counts.get(ch, 0) + 1
        i += 1

    if depth_paren > 0:
        violations.append(f"unbalanced parenthesis: {depth_paren} '(' never closed")
    if depth_bracket > 0:
        violations.append(f"unbalanced bracket: {depth_bracket} '[' never closed")

    for label, count in sorted(ring_counts.items()):
        if count % 2 != 0:
            violations.append(f"ring-bond digit '{label}' appears {count} times (odd)")

    return violations


def cap(s: str) -> str:
    """Replace each "[*]" connection point with "C" (caped SMILES).

    The input must be a valid PSMILES string; the output is 4 bytes
    shorter (two 3-byte "[*]" each become one byte).
    """
    violations = validate(s)
    if violations:
        raise PsmilesError(f"invalid PSMILES {s!r}: " + "; ".join(violations))
    return s.replace(CONNECTION, "C")


def tokenize(s: str) -> list[Token]:
    """Split a PSMILES/SMILES string into chemically meaningful tokens.

    Deterministic longest match: "[*]" and bracket atoms are single
    tokens, Cl/Br are single tokens, then single-character organic
    atoms, aromatic atoms, bonds, branch parentheses, and ring digits
    (%NN counts as one token).  Tokens carry half-open source spans and
    concatenate back to the input exactly.
    """
    tokens: list[Token] = []
    i = 0
    n = len(s)
    while i < n:
        ch = s[i]
        if ch == "[":
            j = s.find("]", i)
            if j < 0:
                raise PsmilesError(f"unclosed bracket atom at byte offset {i} in {s!r}")
            text = s[i : j + 1]
            kind = TokenKind.CONNECTION_POINT if text == CONNECTION else TokenKind.BRACKET_ATOM
            tokens.append(Token(text, (i, j + 1), kind))
            i = j + 1
        elif s[i : i + 2] in _TWO_LETTER:
            tokens.append(Token(s[i : i + 2], (i, i + 2), TokenKind.ATOM))
            i += 2
        elif ch in _ORGANIC:
            tokens.append(Token(ch, (i, i + 1), TokenKind.ATOM))
            i += 1
        elif ch in _AROMATIC:
            tokens.append(Token(ch, (i, i + 1), TokenKind.AROMATIC_ATOM))
            i += 1
        elif ch in _BONDS:
            tokens.append(Token(ch, (i, i + 1), TokenKind.BOND))
            i += 1
        elif ch in "()":
            tokens.append(Token(ch, (i, i + 1), TokenKind.BRANCH))
            i += 1
        elif ch == "%" and i + 2 < n and s[i + 1].isdigit() and s[i + 2].isdigit():
            tokens.append(Token(s[i : i + 3], (i, i + 3), TokenKind.RING_DIGIT))
            i += 3
        elif ch.isdigit():
            tokens.append(Token(ch, (i, i + 1), TokenKind.RING_DIGIT))
            i += 1
        else:
            raise PsmilesError(f"unrecognized character {ch!r} at byte offset {i} in {s!r}")
    return tokens


def token_texts(tokens: list[Token] | list[str]) -> list[str]:
    """Token texts from either Token objects or plain strings."""
    return [t.text if isinstance(t, Token) else t for t in tokens]


def build_merge_map(raw_tokens: list[Token] | list[str], target_tokens: list[str]) -> MergeMap:
    """Align raw tokens to target tokens by greedy left-to-right byte spans.

    Both sequences must concatenate to the same string.  Each target
    token's group collects the raw tokens covering its byte span; a raw
    token straddling a target boundary joins both groups with weight
    proportional to the bytes covered.
    """
    raw = token_texts(raw_tokens)
    raw_cat = "".join(raw)
    tgt_cat = "".join(target_tokens)
    if raw_cat != tgt_cat:
        limit = min(len(raw_cat), len(tgt_cat))
        offset = next(
            (k for k in range(limit) if raw_cat[k] != tgt_cat[k]), limit
        )
        raise DataError(
            f"merge alignment impossible: texts differ at byte offset {offset} "
            f"({raw_cat[offset:offset+8]!r} vs {tgt_cat[offset:offset+8]!r})"
        )

    # Byte start offsets of each raw token.
    starts = []
    pos = 0
    for t in raw:
        starts.append(pos)
        pos += len(t)

    groups: list[tuple[tuple[int, float], ...]] = []
    cursor = 0  # byte offset
    ri = 0  # raw index of the token containing `cursor`
    for tgt in target_tokens:
        end = cursor + len(tgt)
        group: list[tuple[int, float]] = []
        while cursor < end:
            raw_start = starts[ri]
            raw_end = raw_start + len(raw[ri])
            covered = min(end, raw_end) - cursor
            group.append((ri, covered / len(raw[ri])))
            cursor += covered
            if cursor >= raw_end:
                ri += 1
        groups.append(tuple(group))
    return MergeMap(tuple(groups))


def identity_merge_map(n: int) -> MergeMap:
    return MergeMap(tuple(((i, 1.0),) for i in range(n)))


def merge_vectors(vectors: np.ndarray, merge_map: MergeMap) -> np.ndarray:
    """Weighted mean of member vectors per refined group.

    vectors: (n_raw, dim) array, one row per raw token.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise DataError(f"expected a 2-D (n_tokens, dim) array, got shape {vectors.shape}")
    _check_map_length(merge_map, vectors.shape[0])
    out = np.empty((len(merge_map.groups), vectors.shape[1]))
    for gi, group in enumerate(merge_map.groups):
        weights = np.array([w for _, w in group])
        rows = vectors[[i for i, _ in group]]
        out[gi] = weights @ rows / weights.sum()
    return out


def merge_scores(scores: np.ndarray, merge_map: MergeMap) -> np.ndarray:
    """Weighted sum of member scores per refined group (total-preserving)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise DataError(f"expected a 1-D score array, got shape {scores.shape}")
    _check_map_length(merge_map, scores.shape[0])
    return np.array(
        [sum(w * scores[i] for i, w in group) for group in merge_map.groups]
    )


def _check_map_length(merge_map: MergeMap, n_raw: int) -> None:
    used = {i for group in merge_map.groups for i, _ in group}
    if used and (max(used) >= n_raw or len(used) != n_raw):
        raise DataError(
            f"merge map covers {len(used)} raw tokens (max index {max(used)}), "
            f"but {n_raw} were supplied"
        )
    if not used and n_raw:
        raise DataError(f"empty merge map for {n_raw} raw tokens")
