"""Fleet-weighted CO2 emission factors and trip emissions.

All quantities are in gCO2eq (per km for factors). Conversion to kg happens
only at presentation time.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .exceptions import DataError

SHARE_TOLERANCE = 1e-6
PRINTED_TOLERANCE = 0.1


def combined_factor(share_small, factor_small, share_large, factor_large):
    """Fleet-weighted emission factor in gCO2eq/km.

    Raises
    ------
    DataError
        If the two fleet shares do not sum to one or a value is negative.
    """
    if abs(share_small + share_large - 1.0) > SHARE_TOLERANCE:
        raise DataError(
            f"fleet shares must sum to 1, got {share_small} + {share_large}"
        )
    if min(share_small, share_large, factor_small, factor_large) < 0:
        raise DataError("shares and factors must be nonnegative")
    return share_small * factor_small + share_large * factor_large


def trip_emissions(vkt_km, factor_g_per_km):
    """Emissions of a trip (gCO2eq) given its length and the per-km factor."""
    if vkt_km < 0 or factor_g_per_km < 0:
        raise DataError("distance and emission factor must be nonnegative")
    return vkt_km * factor_g_per_km


@dataclass(frozen=True)
class RegionFactors:
    region: str
    share_small_medium: float
    factor_small: float
    share_large: float
    factor_large: float
    printed_combined: float | None = None

    @property
    def combined(self) -> float:
        return combined_factor(
            self.share_small_medium, self.factor_small, self.share_large, self.factor_large
        )


class EmissionFactorTable:
    """Region -> fleet composition lookup, loaded from a CSV file.

    The CSV mirrors the columns ``region, share_small_medium, factor_small,
    share_large, factor_large, combined``. The ``combined`` column holds the
    published value and is checked against the recomputed mixture.
    """

    COLUMNS = ("region", "share_small_medium", "factor_small", "share_large", "factor_large")

    def __init__(self, rows):
        self._rows = {row.region: row for row in rows}
        for row in self._rows.values():
            combined = row.combined
            if row.printed_combined is not None and abs(combined - row.printed_combined) > PRINTED_TOLERANCE:
                raise DataError(
                    f"region {row.region!r}: combined factor {combined:.2f} differs from "
                    f"listed {row.printed_combined:.2f} by more than {PRINTED_TOLERANCE} g/km"
                )

    @classmethod
    def from_csv(cls, path=None):
        if path is None:
            text = resources.files("urbanvkt").joinpath("data/emission_factors.csv").read_text()
        else:
            text = Path(path).read_text(encoding="utf-8")
        reader = csv.DictReader(text.splitlines())
        missing = [c for c in cls.COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"emission factor table is missing columns {missing}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                printed = rec.get("combined")
                rows.append(
                    RegionFactors(
                        region=rec["region"].strip(),
                        share_small_medium=float(rec["share_small_medium"]),
                        factor_small=float(rec["factor_small"]),
                        share_large=float(rec["share_large"]),
                        factor_large=float(rec["factor_large"]),
                        printed_combined=float(printed) if printed not in (None, "") else None,
                    )
                )
            except ValueError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
        return cls(rows)

    @property
    def regions(self):
        return list(self._rows)

    def __getitem__(self, region) -> RegionFactors:
        try:
            return self._rows[region]
        except KeyError:
            raise KeyError(f"unknown region {region!r}; known: {sorted(self._rows)}") from None

    def factor(self, region) -> float:
        return self[region].combined


def default_factor_table() -> EmissionFactorTable:
    return EmissionFactorTable.from_csv()
