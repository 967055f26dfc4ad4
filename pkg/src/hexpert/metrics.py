"""Per-meta-batch metrics rows and their CSV serialization.

The CSV schema is versioned in a leading comment line. Wall-clock timing is
tracked on the row but written to a separate timings file so metrics.csv is
byte-identical across repeated runs of the same config and seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

SCHEMA = "hexpert-metrics-v1"
COLUMNS = (
    "episode", "seed", "experts", "utility", "val_metric",
    "mi_bits", "expert_kl_nats", "selector_entropy",
)


@dataclass
class MetricsRow:
    episode: int
    seed: int
    experts: int
    utility: float
    val_metric: float
    mi_bits: float
    expert_kl_nats: float
    selector_entropy: float
    wall_clock_ms: float = 0.0

    def csv_values(self):
        return (
            str(self.episode), str(self.seed), str(self.experts),
            _fmt(self.utility), _fmt(self.val_metric), _fmt(self.mi_bits),
            _fmt(self.expert_kl_nats), _fmt(self.selector_entropy),
        )


def _fmt(x):
    return format(float(x), ".12g")


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for row in rows:
            writer.writerow(row.csv_values())


def write_timings(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SCHEMA}-timings\n")
        writer = csv.writer(fh)
        writer.writerow(("episode", "seed", "wall_clock_ms"))
        for row in rows:
            writer.writerow((row.episode, row.seed, _fmt(row.wall_clock_ms)))


def read_metrics(path):
    """Read rows back; the schema comment line must match."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        if header != f"# {SCHEMA}":
            raise IOError(f"{path}: unexpected metrics schema {header!r}")
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            rows.append(MetricsRow(
                episode=int(rec["episode"]),
                seed=int(rec["seed"]),
                experts=int(rec["experts"]),
                utility=float(rec["utility"]),
                val_metric=float(rec["val_metric"]),
                mi_bits=float(rec["mi_bits"]),
                expert_kl_nats=float(rec["expert_kl_nats"]),
                selector_entropy=float(rec["selector_entropy"]),
            ))
        return rows
