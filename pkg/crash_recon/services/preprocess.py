import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Union

from crash_recon.core.config import Settings
from crash_recon.core.errors import EmptyInputError
from crash_recon.crud.case import case_crud
from crash_recon.schemas.case import AccidentCase
from crash_recon.services.geometry import standardize_case
from crash_recon.services.supervision import DenseSupervision, build_supervision

logger = logging.getLogger(__name__)


def preprocess_case(case: AccidentCase, settings: Settings) -> DenseSupervision:
    """Dense supervision of one case in its north-up frame"""
    return build_supervision(standardize_case(case), settings.supervision)


def preprocess_corpus(root: Union[str, Path], settings: Settings, workers: int = 0) -> int:
    """
    Write a supervision CSV next to every case of a corpus
    :return: number of cases processed
    """
    cases = case_crud.get_multi(root)
    if not cases:
        raise EmptyInputError(f"no cases found in {root}")
    with ThreadPoolExecutor(max_workers=None if workers <= 0 else workers) as pool:
        sups = list(pool.map(lambda c: preprocess_case(c, settings), cases))
    fallbacks = 0
    for sup in sups:
        case_crud.save_supervision(root, sup)
        fallbacks += int(sup.fallback.sum())
    logger.info(f"preprocessed {len(sups)} cases in {root} ({fallbacks} vehicles used a fallback endpoint)")
    return len(sups)
