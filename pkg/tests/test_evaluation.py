import json

import numpy as np
import pytest

from crash_recon.schemas.synth import DegradationProfile, ScenarioFamily
from crash_recon.services.evaluation import Perturbation, evaluate_corpus, sweep
from crash_recon.services.synth import degrade


@pytest.fixture
def corpus(scene_factory):
    cases, truths = [], {}
    for n, family in enumerate([ScenarioFamily.REAR_END_STRAIGHT, ScenarioFamily.HEAD_ON_CURVE]):
        scene = scene_factory(family)
        case, truth = degrade(scene, DegradationProfile.zero(), np.random.default_rng(n))
        cases.append(case)
        truths[case.case_id] = truth
    return cases, truths


def test_perturbation_is_deterministic(doc_case):
    perturbation = Perturbation(noise=2.0, drop=0.3, seed=4)
    assert perturbation.apply(doc_case, 3) == perturbation.apply(doc_case, 3)
    assert perturbation.describe()["drop"] == 0.3


def test_baseline_evaluation(corpus, tiny_settings, tmp_path):
    cases, truths = corpus
    result = evaluate_corpus(None, cases, truths, tiny_settings, label="baseline")
    assert result.report.n_cases == 2
    assert result.report.config["baseline"]
    assert len(result.reconstructions) == 2
    assert all(c.akd is not None for c in result.cases)
    assert result.report.akd >= 0.0

    result.save(tmp_path)
    assert (tmp_path / "metrics.csv").read_text().startswith("label,")
    details = json.loads((tmp_path / "metrics.json").read_text())
    assert [c["case_id"] for c in details["cases"]] == [c.case_id for c in cases]


def test_sweep_writes_one_row_per_rate(corpus, tiny_settings):
    cases, truths = corpus
    frame = sweep(None, cases, truths, tiny_settings, mode="drop", rates=[0.0, 1.0])
    assert list(frame["rate"]) == [0.0, 1.0]
    assert list(frame["label"]) == ["drop=0", "drop=1"]
    assert set(frame["mode"]) == {"drop"}


def test_sweep_rejects_unknown_mode(corpus, tiny_settings):
    with pytest.raises(ValueError):
        sweep(None, *corpus, tiny_settings, mode="rain")
