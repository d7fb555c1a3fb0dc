import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd

from crash_recon.core.io import write_csv
from crash_recon.crud.base import JsonRepository, read_manifest
from crash_recon.schemas.case import AccidentCase
from crash_recon.services.ingest import dumps_case, ingest_case
from crash_recon.services.supervision import DenseSupervision, supervision_frame, supervision_from_frame

logger = logging.getLogger(__name__)

SIDECAR_SUFFIXES = (".truth.json",)


class CaseRepository(JsonRepository[AccidentCase]):
    """Case documents plus their supervision CSV sidecars"""

    def encode(self, obj: AccidentCase) -> str:
        return dumps_case(obj)

    def decode(self, text: str) -> AccidentCase:
        return ingest_case(text)

    def _matches(self, path: Path) -> bool:
        return super()._matches(path) and not path.name.endswith(SIDECAR_SUFFIXES)

    def get_or_raise(self, root: Union[str, Path], id: str) -> AccidentCase:
        case = self.get(root, id)
        if case is None:
            raise FileNotFoundError(self.path(root, id))
        return case

    def get_split(self, root: Union[str, Path], split: str) -> List[AccidentCase]:
        """
        Cases of a manifest split, in manifest order
        :param root: corpus directory
        :param split: "train", "test" or "all"
        """
        manifest = read_manifest(root)
        if split == "all" or not manifest.get("splits"):
            return self.get_multi(root)
        ids = manifest["splits"].get(split)
        if ids is None:
            raise KeyError(f"manifest has no split '{split}'")
        return [self.get_or_raise(root, id) for id in ids]

    def supervision_path(self, root: Union[str, Path], id: str) -> Path:
        return Path(root) / f"{id}.supervision.csv"

    def save_supervision(self, root: Union[str, Path], sup: DenseSupervision) -> Path:
        return write_csv(self.supervision_path(root, sup.case_id), supervision_frame(sup))

    def get_supervision(self, root: Union[str, Path], id: str) -> Optional[DenseSupervision]:
        path = self.supervision_path(root, id)
        if not path.exists():
            return None
        return supervision_from_frame(id, pd.read_csv(path))

    def attach_supervision(self, root: Union[str, Path], cases: List[AccidentCase]) -> List[AccidentCase]:
        """Cases with their supervision attached; missing CSVs are reported together"""
        missing: List[str] = []
        out = []
        for case in cases:
            sup = self.get_supervision(root, case.case_id)
            if sup is None:
                missing.append(case.case_id)
                continue
            out.append(case.model_copy(update={"supervision": sup}))
        if missing:
            raise FileNotFoundError(
                f"{len(missing)} cases lack supervision (first: {missing[0]}); run `crash-recon preprocess` first"
            )
        return out

    def split_ids(self, root: Union[str, Path]) -> Dict[str, List[str]]:
        return read_manifest(root).get("splits", {"all": self.list_ids(root)})


case_crud = CaseRepository(AccidentCase, suffix=".json")
