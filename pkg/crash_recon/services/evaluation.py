"""
Evaluation harness: perturb inputs, reconstruct, score and aggregate.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from crash_recon.core.config import Settings
from crash_recon.core.io import write_csv, write_json
from crash_recon.schemas.case import AccidentCase
from crash_recon.schemas.metrics import CaseMetrics, MetricReport
from crash_recon.schemas.synth import GroundTruth
from crash_recon.services.geometry import standardize_case
from crash_recon.services.metrics import aggregate, evaluate_case
from crash_recon.services.model import PreparedCase, ReconstructionModel, prepare_case
from crash_recon.services.reconstruct import Reconstruction, baseline_case, reconstruct_case
from crash_recon.services.robustness import ablate_field, drop_entries, inject_position_noise, retain_map

logger = logging.getLogger(__name__)


@dataclass
class Perturbation:
    noise: float = 0.0
    drop: float = 0.0
    ablate: Optional[str] = None
    map_keep: float = 1.0
    seed: int = 0

    def apply(self, case: AccidentCase, index: int) -> AccidentCase:
        """Deterministic per-case perturbation; one rng stream per (seed, case index)"""
        rng = np.random.default_rng([self.seed, index])
        case = inject_position_noise(case, rng, self.noise)
        case = drop_entries(case, rng, self.drop)
        if self.ablate:
            case = ablate_field(case, self.ablate)
        if self.map_keep < 1.0:
            case, _ = retain_map(case, rng, self.map_keep)
        return case

    def describe(self) -> Dict[str, object]:
        return {"noise": self.noise, "drop": self.drop, "ablate": self.ablate, "map_keep": self.map_keep,
                "seed": self.seed}


@dataclass
class EvaluationResult:
    report: MetricReport
    cases: List[CaseMetrics]
    reconstructions: List[Reconstruction] = field(default_factory=list)

    def save(self, out_dir: Union[str, Path]) -> Path:
        """CSV row of the report plus one JSON of per-case details"""
        out_dir = Path(out_dir)
        path = write_csv(out_dir / "metrics.csv", pd.DataFrame([self.report.csv_row()]))
        write_json(out_dir / "metrics.json", {
            "report": self.report.model_dump(mode="json"),
            "cases": [c.model_dump(mode="json") for c in self.cases],
        })
        return path


def _workers(n: int) -> Optional[int]:
    return None if n <= 0 else n


def evaluate_corpus(model: Optional[ReconstructionModel], cases: Sequence[AccidentCase],
                    truths: Dict[str, GroundTruth], settings: Settings,
                    perturbation: Optional[Perturbation] = None, label: str = "model",
                    conservative: Optional[bool] = None, workers: int = 1) -> EvaluationResult:
    """
    Reconstruct every case (the baseline when ``model`` is None) and score it
    :param truths: sealed ground truth by case id; cases without one are scored on annotations only
    :param perturbation: applied to model inputs only, scoring always uses the clean case
    """
    perturbation = perturbation or Perturbation()
    clean = [standardize_case(c) for c in cases]
    perturbed = [perturbation.apply(c, n) for n, c in enumerate(clean)]
    with ThreadPoolExecutor(max_workers=_workers(workers)) as pool:
        prepared: List[PreparedCase] = list(pool.map(lambda c: prepare_case(c, settings), perturbed))
    reconstructions = [reconstruct_case(model, p) if model is not None else baseline_case(p, settings) for p in prepared]
    scored = [
        evaluate_case(rec, case, truths.get(case.case_id), settings.metrics, conservative)
        for rec, case in zip(reconstructions, clean)
    ]
    config = {
        **perturbation.describe(),
        "conservative_circle": settings.metrics.conservative_circle if conservative is None else conservative,
        "contact_threshold_ft": settings.metrics.contact_threshold_ft,
        "reference_direction": "initiator_terminal_motion",
        "baseline": model is None,
    }
    return EvaluationResult(aggregate(scored, label, config), scored, reconstructions)


def sweep(model: Optional[ReconstructionModel], cases: Sequence[AccidentCase], truths: Dict[str, GroundTruth],
          settings: Settings, mode: str = "drop", rates: Optional[Sequence[float]] = None, seed: int = 0,
          workers: int = 1) -> pd.DataFrame:
    """
    One metric row per perturbation level
    :param mode: "drop" (entry-missing rate), "noise" (accident-site noise cap in m) or "map" (kept map fraction)
    """
    if mode not in ("drop", "noise", "map"):
        raise ValueError(f"unknown sweep mode '{mode}'")
    rates = list(rates if rates is not None else settings.metrics.sweep_rates)
    rows = []
    for rate in rates:
        perturbation = Perturbation(seed=seed)
        if mode == "drop":
            perturbation.drop = rate
        elif mode == "noise":
            perturbation.noise = rate
        else:
            perturbation.map_keep = rate
        result = evaluate_corpus(model, cases, truths, settings, perturbation, label=f"{mode}={rate:g}",
                                 workers=workers)
        rows.append({"mode": mode, "rate": rate, **result.report.csv_row()})
        logger.info(f"sweep {mode}={rate:g}: AKD {result.report.akd:.3f} m, CSA {result.report.csa:.2f}%")
    return pd.DataFrame(rows)
