"""MetricReport: named scalars plus optional maps and histograms."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from clbench.grid import Grid

CSV_COLUMNS = ("metric", "variable", "lead_hours", "split", "mask_id", "value", "defined")


@dataclass
class MetricRecord:
    metric: str
    variable: str
    lead_hours: float | None
    split: str
    mask_id: str
    value: float | None
    defined: bool = True
    tags: dict = field(default_factory=dict)
    reason: str = ""

    def key(self):
        return (self.metric, self.variable, self.lead_hours, self.split, self.mask_id)

    def to_json(self) -> dict:
        d = {
            "metric": self.metric,
            "variable": self.variable,
            "lead_hours": self.lead_hours,
            "split": self.split,
            "mask_id": self.mask_id,
            "value": self.value if self.defined else None,
            "defined": self.defined,
        }
        if self.tags:
            d["tags"] = dict(self.tags)
        if self.reason:
            d["reason"] = self.reason
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MetricRecord":
        return cls(
            metric=d["metric"],
            variable=d["variable"],
            lead_hours=d.get("lead_hours"),
            split=d.get("split", ""),
            mask_id=d.get("mask_id", ""),
            value=d.get("value"),
            defined=bool(d.get("defined", True)),
            tags=dict(d.get("tags", {})),
            reason=d.get("reason", ""),
        )


@dataclass
class MetricReport:
    """Evaluation output.

    ``maps`` holds per-pixel fields (e.g. ``mean_bias/t2m/6h``) and
    ``histograms`` rank-histogram counts keyed the same way.
    """

    records: list[MetricRecord] = field(default_factory=list)
    maps: dict[str, np.ndarray] = field(default_factory=dict)
    histograms: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    map_grids: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def is_empty(self) -> bool:
        return not (self.records or self.maps or self.histograms)

    def add(self, record: MetricRecord) -> None:
        if record.defined and (record.value is None or not math.isfinite(record.value)):
            raise ValueError(f"defined record {record.key()} has non-finite value {record.value}")
        self.records.append(record)

    def get(self, metric: str, variable: str | None = None, lead_hours=None) -> MetricRecord:
        hits = [
            r
            for r in self.records
            if r.metric == metric
            and (variable is None or r.variable == variable)
            and (lead_hours is None or r.lead_hours == lead_hours)
        ]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} records match {(metric, variable, lead_hours)}")
        return hits[0]

    def value(self, metric: str, variable: str | None = None, lead_hours=None) -> float | None:
        return self.get(metric, variable, lead_hours).value

    def merge(self, other: "MetricReport") -> "MetricReport":
        return MetricReport(
            records=self.records + other.records,
            maps={**self.maps, **other.maps},
            histograms={**self.histograms, **other.histograms},
            metadata={**self.metadata, **other.metadata},
            map_grids={**self.map_grids, **other.map_grids},
        )

    def to_json(self, include_maps: bool = False) -> str:
        """Serialize; ``include_maps`` embeds map values (NaN as null) and grids."""
        maps = {}
        for k, v in self.maps.items():
            a = np.asarray(v, dtype=np.float64)
            entry = {"shape": list(a.shape)}
            if include_maps:
                entry["data"] = [x if math.isfinite(x) else None for x in a.ravel().tolist()]
                g = self.map_grids.get(k)
                if g is not None:
                    entry["grid"] = {"lats": g.lats.tolist(), "lons": g.lons.tolist(), "periodic_lon": g.periodic_lon}
            maps[k] = entry
        doc = {
            "metadata": self.metadata,
            "records": [r.to_json() for r in self.records],
            "histograms": {k: [int(x) for x in v] for k, v in self.histograms.items()},
            "maps": maps,
        }
        return json.dumps(doc, indent=2, allow_nan=False)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        doc = json.loads(text)
        maps, grids = {}, {}
        for k, entry in doc.get("maps", {}).items():
            if "data" not in entry:
                continue
            vals = [np.nan if x is None else x for x in entry["data"]]
            maps[k] = np.asarray(vals, dtype=np.float64).reshape(entry["shape"])
            if "grid" in entry:
                g = entry["grid"]
                grids[k] = Grid(g["lats"], g["lons"], g["periodic_lon"])
        return cls(
            records=[MetricRecord.from_json(r) for r in doc.get("records", [])],
            maps=maps,
            histograms={k: np.asarray(v, dtype=np.int64) for k, v in doc.get("histograms", {}).items()},
            metadata=doc.get("metadata", {}),
            map_grids=grids,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.records:
            writer.writerow(
                [
                    r.metric,
                    r.variable,
                    "" if r.lead_hours is None else _fmt(r.lead_hours),
                    r.split,
                    r.mask_id,
                    repr(float(r.value)) if r.defined else "",
                    "true" if r.defined else "false",
                ]
            )
        return buf.getvalue()


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))
