"""Record linkage over pseudonym vectors.

Two modes:

* exact: join on the composite digest. Composites that occur more than once
  on either side are ambiguous; those records are excluded and counted in the
  audit block rather than guessed at.
* probabilistic: Fellegi-Sunter scoring over the four per-field digests.
  Each candidate pair gets a log2 likelihood-ratio weight from per-field
  agreement probabilities m (among true matches) and u (among non-matches),
  is classified against two thresholds, and Match-class pairs are reduced to
  a one-to-one assignment greedily in descending weight.

u can be supplied or estimated from the data as the chance-agreement rate
of a random cross pair, computed from per-field digest frequencies.

Everything here is deterministic: ties break on (index_a, index_b), so a
fixed pair of datasets and params always yields the same LinkResult.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace

from .errors import DegenerateParams, MissingPseudonyms, SchemaCollision
from .model import QID_FIELDS, Dataset, DatasetDescriptor, Record
from .pseudonym import PseudonymVector

U_CLAMP = 1e-9

MATCH = "Match"
POSSIBLE = "Possible"
NON_MATCH = "NonMatch"


@dataclass(frozen=True)
class LinkageParams:
    """Parameters for one linkage pass.

    m and u are per-field probabilities ordered like QID_FIELDS. u may be
    None, in which case link() estimates it from the data. blocking_fields
    name the fields whose digests must agree exactly before a pair is scored;
    an empty tuple scores every cross pair.
    """

    mode: str = "probabilistic"  # "exact" | "probabilistic"
    m: tuple[float, float, float, float] = (0.95, 0.95, 0.98, 0.97)
    u: tuple[float, float, float, float] | None = None
    t_upper: float = 8.0
    t_lower: float = 0.0
    blocking_fields: tuple[str, ...] = ("date_of_birth",)

    def validate(self) -> None:
        if self.mode not in ("exact", "probabilistic"):
            raise ValueError(f"unknown linkage mode {self.mode!r}")
        if self.t_upper < self.t_lower:
            raise ValueError("t_upper must be >= t_lower")
        for name in self.blocking_fields:
            if name not in QID_FIELDS:
                raise ValueError(f"unknown blocking field {name!r}")


@dataclass(frozen=True)
class ScoredPair:
    index_a: int
    index_b: int
    agreement: tuple[int, int, int, int]
    weight: float
    match_class: str


@dataclass(frozen=True)
class LinkResult:
    pairs: tuple[tuple[int, int], ...]
    unmatched_a: tuple[int, ...]
    unmatched_b: tuple[int, ...]
    audit: dict = field(default_factory=dict)


def _pseudonyms(ds: Dataset) -> list[PseudonymVector]:
    vectors = []
    for i, row in enumerate(ds.rows):
        if row.pseudonym is None:
            raise MissingPseudonyms(f"{ds.station_id} row {i} has no pseudonym vector")
        vectors.append(row.pseudonym)
    return vectors


def estimate_u(
    pseudos_a: list[PseudonymVector], pseudos_b: list[PseudonymVector]
) -> tuple[float, float, float, float]:
    """Chance-agreement probability per field for a random cross pair.

    u_i = sum over digest values v of fA_i(v) * fB_i(v), where f are the
    relative frequencies of per-field digests; clamped away from 0 and 1 so
    the log weights stay finite.
    """
    if not pseudos_a or not pseudos_b:
        raise ValueError("u estimation needs non-empty datasets on both sides")
    n_a, n_b = len(pseudos_a), len(pseudos_b)
    out = []
    for i in range(4):
        freq_a = Counter(p.per_field[i] for p in pseudos_a)
        freq_b = Counter(p.per_field[i] for p in pseudos_b)
        u_i = sum(
            (count_a / n_a) * (freq_b[value] / n_b)
            for value, count_a in freq_a.items()
            if value in freq_b
        )
        out.append(min(max(u_i, U_CLAMP), 1.0 - U_CLAMP))
    return tuple(out)


def field_weights(
    params: LinkageParams,
) -> tuple[tuple[float, float, float, float], tuple[float, float, float, float]]:
    """(agreement, disagreement) log2 weight per field."""
    if params.u is None:
        raise ValueError("params.u must be resolved before scoring")
    agree = tuple(math.log2(m / u) for m, u in zip(params.m, params.u))
    disagree = tuple(
        math.log2((1.0 - m) / (1.0 - u)) for m, u in zip(params.m, params.u)
    )
    return agree, disagree


def score_pair(
    pa: PseudonymVector,
    pb: PseudonymVector,
    params: LinkageParams,
    index_a: int = -1,
    index_b: int = -1,
) -> ScoredPair:
    """Score one candidate pair; class comes from the two thresholds."""
    agree_w, disagree_w = field_weights(params)
    agreement = tuple(
        int(pa.per_field[i] == pb.per_field[i]) for i in range(4)
    )
    weight = sum(
        agree_w[i] if agreement[i] else disagree_w[i] for i in range(4)
    )
    if weight >= params.t_upper:
        match_class = MATCH
    elif weight <= params.t_lower:
        match_class = NON_MATCH
    else:
        match_class = POSSIBLE
    return ScoredPair(index_a, index_b, agreement, weight, match_class)


def _link_exact(
    pseudos_a: list[PseudonymVector], pseudos_b: list[PseudonymVector]
) -> tuple[list[tuple[int, int]], dict]:
    by_comp_a: dict[str, list[int]] = {}
    by_comp_b: dict[str, list[int]] = {}
    for i, p in enumerate(pseudos_a):
        by_comp_a.setdefault(p.composite, []).append(i)
    for j, p in enumerate(pseudos_b):
        by_comp_b.setdefault(p.composite, []).append(j)

    pairs = []
    collisions_a = sum(1 for idxs in by_comp_a.values() if len(idxs) > 1)
    collisions_b = sum(1 for idxs in by_comp_b.values() if len(idxs) > 1)
    excluded = 0
    for comp, idxs_a in by_comp_a.items():
        idxs_b = by_comp_b.get(comp)
        if idxs_b is None:
            continue
        if len(idxs_a) == 1 and len(idxs_b) == 1:
            pairs.append((idxs_a[0], idxs_b[0]))
        else:
            excluded += len(idxs_a) + len(idxs_b)
    pairs.sort()
    audit = {
        "mode": "exact",
        "composite_collisions_a": collisions_a,
        "composite_collisions_b": collisions_b,
        "records_excluded_by_collision": excluded,
        "class_counts": {"match": len(pairs), "possible": 0, "non_match": 0},
    }
    return pairs, audit


def _candidates(
    pseudos_a: list[PseudonymVector],
    pseudos_b: list[PseudonymVector],
    blocking: tuple[int, ...],
) -> list[tuple[int, int]]:
    if not blocking:
        return [(i, j) for i in range(len(pseudos_a)) for j in range(len(pseudos_b))]
    buckets: dict[tuple[str, ...], list[int]] = {}
    for j, p in enumerate(pseudos_b):
        buckets.setdefault(tuple(p.per_field[i] for i in blocking), []).append(j)
    out = []
    for i, p in enumerate(pseudos_a):
        for j in buckets.get(tuple(p.per_field[k] for k in blocking), ()):
            out.append((i, j))
    return out


def link(ds_a: Dataset, ds_b: Dataset, params: LinkageParams) -> LinkResult:
    """Link two pseudonymized datasets.

    Probabilistic mode resolves u (estimating it when unset), requires
    m_i > u_i on every field, scores candidates surviving the blocking pass,
    and keeps Match-class pairs under a one-to-one constraint: descending
    weight, ties by (index_a, index_b).
    """
    params.validate()
    pseudos_a = _pseudonyms(ds_a)
    pseudos_b = _pseudonyms(ds_b)

    if params.mode == "exact":
        pairs, audit = _link_exact(pseudos_a, pseudos_b)
    else:
        if not pseudos_a or not pseudos_b:
            resolved = params if params.u is not None else None
            pairs = []
            audit = {
                "mode": "probabilistic",
                "n_candidates": 0,
                "class_counts": {"match": 0, "possible": 0, "non_match": 0},
                "t_upper": params.t_upper,
                "t_lower": params.t_lower,
                "m": list(params.m),
                "u": list(resolved.u) if resolved else None,
                "u_estimated": False,
                "blocking_fields": list(params.blocking_fields),
            }
        else:
            estimated = params.u is None
            resolved = (
                replace(params, u=estimate_u(pseudos_a, pseudos_b))
                if estimated
                else params
            )
            for i in range(4):
                if resolved.m[i] <= resolved.u[i]:
                    raise DegenerateParams(
                        f"m <= u on field {QID_FIELDS[i]} "
                        f"({resolved.m[i]} <= {resolved.u[i]})"
                    )
            blocking = tuple(QID_FIELDS.index(f) for f in params.blocking_fields)
            candidates = _candidates(pseudos_a, pseudos_b, blocking)

            counts = {"match": 0, "possible": 0, "non_match": 0}
            match_pairs: list[ScoredPair] = []
            for i, j in candidates:
                scored = score_pair(pseudos_a[i], pseudos_b[j], resolved, i, j)
                if scored.match_class == MATCH:
                    counts["match"] += 1
                    match_pairs.append(scored)
                elif scored.match_class == POSSIBLE:
                    counts["possible"] += 1
                else:
                    counts["non_match"] += 1

            match_pairs.sort(key=lambda s: (-s.weight, s.index_a, s.index_b))
            used_a: set[int] = set()
            used_b: set[int] = set()
            pairs = []
            for scored in match_pairs:
                if scored.index_a in used_a or scored.index_b in used_b:
                    continue
                used_a.add(scored.index_a)
                used_b.add(scored.index_b)
                pairs.append((scored.index_a, scored.index_b))
            pairs.sort()
            audit = {
                "mode": "probabilistic",
                "n_candidates": len(candidates),
                "class_counts": counts,
                "t_upper": resolved.t_upper,
                "t_lower": resolved.t_lower,
                "m": list(resolved.m),
                "u": list(resolved.u),
                "u_estimated": estimated,
                "blocking_fields": list(params.blocking_fields),
            }

    matched_a = {i for i, _ in pairs}
    matched_b = {j for _, j in pairs}
    return LinkResult(
        pairs=tuple(pairs),
        unmatched_a=tuple(i for i in range(len(pseudos_a)) if i not in matched_a),
        unmatched_b=tuple(j for j in range(len(pseudos_b)) if j not in matched_b),
        audit=audit,
    )


def merge(result: LinkResult, ds_a: Dataset, ds_b: Dataset) -> Dataset:
    """One row per accepted pair with the union of payload variables.

    Colliding variable names get station-id prefixes on both sides; pseudonym
    columns are dropped entirely, they have no further use after assignment.
    """
    names_a = ds_a.variable_names()
    names_b = ds_b.variable_names()
    collisions = set(names_a) & set(names_b)

    def out_name(station_id: str, name: str) -> str:
        return f"{station_id}.{name}" if name in collisions else name

    schema = []
    for name, vtype in ds_a.schema:
        schema.append((out_name(ds_a.station_id, name), vtype))
    for name, vtype in ds_b.schema:
        schema.append((out_name(ds_b.station_id, name), vtype))
    out_names = [n for n, _ in schema]
    if len(out_names) != len(set(out_names)):
        raise SchemaCollision(f"merged schema still collides: {sorted(out_names)}")

    rows = []
    for i, j in result.pairs:
        payload: dict[str, object] = {}
        for name in names_a:
            payload[out_name(ds_a.station_id, name)] = ds_a.rows[i].payload[name]
        for name in names_b:
            payload[out_name(ds_b.station_id, name)] = ds_b.rows[j].payload[name]
        rows.append(Record(payload=payload))

    merged = Dataset(
        station_id=f"{ds_a.station_id}+{ds_b.station_id}",
        schema=tuple(schema),
        rows=rows,
        descriptor=DatasetDescriptor(
            source="merged",
            extracted_at=max(
                ds_a.descriptor.extracted_at, ds_b.descriptor.extracted_at
            ),
            row_count=len(rows),
        ),
    )
    merged.validate()
    return merged
