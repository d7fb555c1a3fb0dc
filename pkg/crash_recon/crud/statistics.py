import logging
from typing import Iterable, List

import pandas as pd

from crash_recon.core.errors import EmptyInputError
from crash_recon.schemas.case import TRACKED_FIELDS, AccidentCase, FieldStatus
from crash_recon.schemas.statistics import CorpusStats, FieldMissingness

logger = logging.getLogger(__name__)

# Column titles of the missingness table
FIELD_TITLES = {
    "trajectory": "Trajectory",
    "impact_area": "Impact Area",
    "speed_limit": "Speed Limit",
    "pre_movement": "Pre-movement",
    "avoidance": "Avoidance",
    "edr": "EDR Data",
    "initial_lane": "Initial Lane",
}


def case_stats(cases: Iterable[AccidentCase]) -> CorpusStats:
    """
    Per-field missing / unknown / malformed percentages over all valid vehicles
    :param cases: ingested cases
    :return: per-field percentages of the missingness table
    """
    cases: List[AccidentCase] = list(cases)
    if not cases:
        raise EmptyInputError("case_stats needs at least one case")
    counts = {f: {s: 0 for s in FieldStatus} for f in TRACKED_FIELDS}
    n_vehicles = 0
    for case in cases:
        for vehicle in case.vehicles:
            if not vehicle.valid:
                continue
            n_vehicles += 1
            for f in TRACKED_FIELDS:
                counts[f][vehicle.field_status(f)] += 1
    if n_vehicles == 0:
        raise EmptyInputError("no valid vehicles in the given cases")

    def pct(n: int) -> float:
        return round(100.0 * n / n_vehicles, 2)

    fields = [
        FieldMissingness(
            field=f,
            missing=pct(counts[f][FieldStatus.MISSING]),
            unknown=pct(counts[f][FieldStatus.UNKNOWN]),
            malformed=pct(counts[f][FieldStatus.MALFORMED]),
        )
        for f in TRACKED_FIELDS
    ]
    logger.info(f"missingness computed over {len(cases)} cases / {n_vehicles} vehicles")
    return CorpusStats(n_cases=len(cases), n_vehicles=n_vehicles, fields=fields)


def stats_frame(stats: CorpusStats) -> pd.DataFrame:
    """Missing / Unknown / Error rows, one column per tracked field"""
    rows = stats.as_rows()
    frame = pd.DataFrame.from_dict(rows, orient="index")[list(TRACKED_FIELDS)]
    frame = frame.rename(columns=FIELD_TITLES)
    frame.index.name = "category"
    return frame.reset_index()
