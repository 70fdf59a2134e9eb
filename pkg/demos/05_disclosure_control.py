"""Output checking: k-threshold suppression and secondary suppression.

Nothing leaves the analysis station as row-level data, and no released
count may fall below k_min. In crosstabs with released marginals, a single
suppressed cell would be recoverable by subtraction, so a second cell goes
with it.
"""

from phtlink.analysis import (
    AnalysisSpec,
    DisclosurePolicy,
    run_analysis,
    table_to_csv,
    validate,
)
from phtlink.model import Record, make_dataset

rows = (
    [{"g": "F", "s": "low"}] * 1      # a single person: must never be released
    + [{"g": "F", "s": "high"}] * 14
    + [{"g": "M", "s": "low"}] * 9
    + [{"g": "M", "s": "high"}] * 11
)
merged = make_dataset(
    "A+B",
    (("g", "categorical"), ("s", "categorical")),
    [Record(payload=dict(r)) for r in rows],
)

raw = run_analysis(merged, AnalysisSpec("crosstab", ("g", "s")))
print("raw crosstab (counts incl. marginals):")
print(table_to_csv(raw.tables[0]))

out = validate(raw, DisclosurePolicy(k_min=5))
print("after validation with k_min=5 ('*' = suppressed):")
print(table_to_csv(out.tables[0]))
print("suppressed cells:", out.audit["disclosure"]["suppressed_cells"])

# idempotence: validating again changes nothing
again = validate(
    type(raw)(tables=out.tables, audit=out.audit), DisclosurePolicy(k_min=5)
)
print("validate is idempotent:",
      [t.rows for t in again.tables] == [t.rows for t in out.tables])
