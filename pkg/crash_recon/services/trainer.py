"""
Staged training loop.

Stage 1 trains the base decoder and timing heads with the encoder and pair
branch frozen, stage 2 activates the pair branch, stage 3 fine-tunes
everything. Ramped losses warm up from zero within each stage and the
teacher-forcing ratio on the transition time decays across stages.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from crash_recon.core.config import Settings, StageSettings
from crash_recon.core.errors import TrainingAbortedError
from crash_recon.core.io import write_json
from crash_recon.crud.case import case_crud
from crash_recon.crud.checkpoint import save_checkpoint
from crash_recon.crud.truth import truth_crud
from crash_recon.nn.autodiff import Tape, Tensor
from crash_recon.nn.optim import AdamW, ParamGroup
from crash_recon.schemas.case import AccidentCase
from crash_recon.schemas.synth import GroundTruth
from crash_recon.schemas.training import EpochRecord, StepRecord
from crash_recon.services.evaluation import evaluate_corpus
from crash_recon.services.model import PreparedCase, ReconstructionModel, prepare_case
from crash_recon.services.objectives import LossBreakdown, total_loss

logger = logging.getLogger(__name__)


def prepare_all(cases: Sequence[AccidentCase], settings: Settings, use_supervision: bool,
                workers: int = 0) -> List[PreparedCase]:
    """Featurize cases on a thread pool; output order follows input order"""
    with ThreadPoolExecutor(max_workers=None if workers <= 0 else workers) as pool:
        return list(pool.map(lambda c: prepare_case(c, settings, use_supervision), cases))


def group_digest(model: ReconstructionModel) -> Dict[str, bytes]:
    """Raw parameter bytes per group, for bit-exact freezing checks"""
    out = {}
    for group, named in model.grouped_parameters().items():
        out[group] = b"".join(p.data.tobytes() for _, p in named)
    return out


@dataclass
class TrainResult:
    checkpoint: Path
    steps: int = 0
    skipped: int = 0
    initial_traj: Optional[float] = None
    stage_traj: Dict[int, float] = field(default_factory=dict)
    epochs: List[EpochRecord] = field(default_factory=list)


class Trainer:
    """
    Runs the configured schedule over a preprocessed corpus
    :param settings: resolved settings; ``schedule`` drives stages and optimizer
    :param out_dir: receives the checkpoint, train_log.jsonl and resolved_config.json
    """

    def __init__(self, settings: Settings, out_dir: Union[str, Path], workers: int = 0):
        self.settings = settings
        self.out_dir = Path(out_dir)
        self.workers = workers
        self.model = ReconstructionModel(settings)
        schedule = settings.schedule
        self.optimizer = AdamW(
            groups=[
                ParamGroup(name, [p for _, p in named], schedule.lr_for(name))
                for name, named in self.model.grouped_parameters().items()
            ],
            weight_decay=schedule.weight_decay,
            clip_norm=schedule.clip_norm,
        )
        self.log_path = self.out_dir / "train_log.jsonl"
        self.global_step = 0

    def stages(self) -> List[StageSettings]:
        """The configured stages, or one joint stage when stage-wise training is disabled"""
        schedule = self.settings.schedule
        if schedule.stagewise:
            return list(schedule.stages)
        epochs = sum(s.epochs for s in schedule.stages)
        return [StageSettings(stage=3, epochs=epochs, frozen_groups=[], teacher_forcing=0.0, pair_branch=True)]

    def _log(self, record) -> None:
        with open(self.log_path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")

    def batch_loss(self, batch: Sequence[PreparedCase], stage: StageSettings, step: int) -> LossBreakdown:
        """Mean of per-case weighted totals over the batch; must run inside a Tape"""
        schedule = self.settings.schedule
        freeze_encoder = "encoder" in stage.frozen_groups
        breakdowns = []
        for prepared in batch:
            out = self.model(prepared, teacher_forcing=stage.teacher_forcing, pair_branch=stage.pair_branch,
                             freeze_encoder=freeze_encoder)
            breakdowns.append(total_loss(out.loss_inputs(prepared), prepared.supervision, self.settings.objectives,
                                         step, schedule.warmup_steps, schedule.ramped_losses))
        scale = 1.0 / len(batch)
        total: Tensor = breakdowns[0].total * scale
        for b in breakdowns[1:]:
            total = total + b.total * scale
        terms = {name: Tensor(np.mean([float(b.terms[name].data) for b in breakdowns]))
                 for name in breakdowns[0].terms}
        counts = {name: int(sum(b.counts[name] for b in breakdowns)) for name in breakdowns[0].counts}
        return LossBreakdown(terms=terms, counts=counts, weights=breakdowns[0].weights, total=total)

    def train_step(self, batch: Sequence[PreparedCase], stage: StageSettings, epoch: int, step: int) -> StepRecord:
        """Forward, backward and one optimizer step; non-finite batches are skipped"""
        self.optimizer.zero_grad()
        with Tape() as tape:
            breakdown = self.batch_loss(batch, stage, step)
            values = breakdown.values()
            record = StepRecord(stage=stage.stage, epoch=epoch, step=self.global_step, weights=breakdown.weights,
                                counts=breakdown.counts, **values)
            total = float(breakdown.total.data)
            record.total = total
            if not np.isfinite(total):
                logger.warning(f"stage {stage.stage} epoch {epoch}: non-finite loss, batch skipped")
                record.skipped = True
                return record
            params = [p for g in self.optimizer.active() for p in g.params]
            tape.backward(breakdown.total, params)
        result = self.optimizer.step()
        record.skipped = not result.applied
        record.grad_norm = result.grad_norm
        return record

    def evaluate(self, cases: Sequence[AccidentCase], truths: Dict[str, GroundTruth]) -> Dict[str, float]:
        if not cases:
            return {}
        report = evaluate_corpus(self.model, cases, truths, self.settings, label="epoch", workers=self.workers).report
        return {"akd": report.akd, "avd": report.avd, "aapd_tan": report.aapd_tan, "aapd_norm": report.aapd_norm,
                "cr": report.cr, "csa": report.csa}

    def fit(self, train: Sequence[PreparedCase], held_out: Sequence[AccidentCase] = (),
            truths: Optional[Dict[str, GroundTruth]] = None, ckpt_path: Optional[Union[str, Path]] = None) -> TrainResult:
        """
        Run every stage, then write the checkpoint
        :param train: prepared training cases with supervision attached
        :param held_out: raw held-out cases evaluated after every ``eval_every`` epochs
        """
        if not train:
            raise ValueError("training split is empty")
        schedule = self.settings.schedule
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.log_path.write_text("", encoding="utf-8")
        write_json(self.out_dir / "resolved_config.json", self.settings.model_dump(mode="json"))
        ckpt_path = Path(ckpt_path) if ckpt_path else self.out_dir / "ckpt.bin"
        truths = truths or {}
        result = TrainResult(checkpoint=ckpt_path)
        batch_size = schedule.batch_size
        last_stage = 0

        for stage in self.stages():
            self.optimizer.set_frozen(stage.frozen_groups)
            logger.info(f"stage {stage.stage}: {stage.epochs} epochs, frozen {stage.frozen_groups or 'none'}, "
                        f"teacher forcing {stage.teacher_forcing}, pair branch {'on' if stage.pair_branch else 'off'}")
            stage_step = 0
            for epoch in range(stage.epochs):
                rng = np.random.default_rng([self.settings.seed, stage.stage, epoch])
                order = rng.permutation(len(train))
                batches = [[train[i] for i in order[n:n + batch_size]] for n in range(0, len(order), batch_size)]
                skipped, trajs = 0, []
                for batch in batches:
                    record = self.train_step(batch, stage, epoch, stage_step)
                    self._log(record)
                    stage_step += 1
                    self.global_step += 1
                    if record.skipped:
                        skipped += 1
                        result.skipped += 1
                        if skipped > schedule.max_skip_fraction * len(batches):
                            raise TrainingAbortedError(
                                f"stage {stage.stage} epoch {epoch}: {skipped} of {len(batches)} batches skipped "
                                f"(last total loss {record.total})"
                            )
                        continue
                    trajs.append(record.traj)
                    if result.initial_traj is None:
                        result.initial_traj = record.traj
                mean_traj = float(np.mean(trajs)) if trajs else float("nan")
                metrics = {}
                if held_out and (epoch + 1) % schedule.eval_every == 0:
                    metrics = self.evaluate(held_out, truths)
                epoch_record = EpochRecord(stage=stage.stage, epoch=epoch, steps=len(batches), skipped=skipped,
                                           mean_traj=mean_traj, metrics=metrics)
                self._log(epoch_record)
                result.epochs.append(epoch_record)
                result.stage_traj[stage.stage] = mean_traj
                logger.info(f"stage {stage.stage} epoch {epoch}: L_traj {mean_traj:.4f}, {skipped} skipped"
                            + (f", held-out AKD {metrics['akd']:.3f} m, CR {metrics['cr']:.1f}%" if metrics else ""))
            last_stage = stage.stage

        result.steps = self.global_step
        save_checkpoint(ckpt_path, self.model.named_with_groups(), last_stage, self.model.hyperparameters())
        return result


def load_training_corpus(root: Union[str, Path], settings: Settings, workers: int = 0):
    """
    Training cases (prepared, with supervision) and raw held-out cases with their truth
    :raises FileNotFoundError: when preprocessing has not been run
    """
    splits = case_crud.split_ids(root)
    train_cases = case_crud.get_split(root, "train") if "train" in splits else case_crud.get_split(root, "all")
    train_cases = case_crud.attach_supervision(root, train_cases)
    held_out = case_crud.get_split(root, "test") if "test" in splits else []
    truths = truth_crud.get_many(root, [c.case_id for c in held_out])
    logger.info(f"corpus {root}: {len(train_cases)} training cases, {len(held_out)} held out")
    return prepare_all(train_cases, settings, True, workers), held_out, truths


def train(root: Union[str, Path], settings: Settings, out: Union[str, Path], workers: int = 0) -> TrainResult:
    """Train on ``root`` and write the checkpoint to ``out`` (logs and config go next to it)"""
    out = Path(out)
    prepared, held_out, truths = load_training_corpus(root, settings, workers)
    trainer = Trainer(settings, out.parent, workers)
    return trainer.fit(prepared, held_out, truths, ckpt_path=out)


