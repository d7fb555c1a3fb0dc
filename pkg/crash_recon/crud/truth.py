from pathlib import Path
from typing import Dict, List, Union

from crash_recon.crud.base import JsonRepository
from crash_recon.schemas.synth import GroundTruth


class TruthRepository(JsonRepository[GroundTruth]):
    """Sealed ground-truth sidecars, read only by evaluation"""

    def get_many(self, root: Union[str, Path], ids: List[str]) -> Dict[str, GroundTruth]:
        out = {}
        for id in ids:
            truth = self.get(root, id)
            if truth is not None:
                out[id] = truth
        return out


truth_crud = TruthRepository(GroundTruth, suffix=".truth.json")
