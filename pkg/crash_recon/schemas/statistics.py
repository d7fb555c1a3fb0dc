from typing import Dict, List

from pydantic import BaseModel, Field


class FieldMissingness(BaseModel):
    field: str
    missing: float = Field(..., ge=0, le=100, description="Percent of valid vehicles")
    unknown: float = Field(..., ge=0, le=100)
    malformed: float = Field(..., ge=0, le=100)


class CorpusStats(BaseModel):
    n_cases: int
    n_vehicles: int
    fields: List[FieldMissingness]

    def as_rows(self) -> Dict[str, Dict[str, float]]:
        """Missing/Unknown/Error rows by column, matching the report table layout"""
        rows = {"Missing": {}, "Unknown": {}, "Error": {}}
        for f in self.fields:
            rows["Missing"][f.field] = f.missing
            rows["Unknown"][f.field] = f.unknown
            rows["Error"][f.field] = f.malformed
        return rows
