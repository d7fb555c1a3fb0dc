"""
End-to-end reconstruction model and per-case input preparation.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from crash_recon.core.config import PARAM_GROUPS, Settings
from crash_recon.crud.checkpoint import check_compatible, load_checkpoint
from crash_recon.nn.autodiff import Tensor, no_grad
from crash_recon.nn.layers import Module
from crash_recon.schemas.case import AccidentCase
from crash_recon.schemas.geometry import CATEGORY_ORDER
from crash_recon.services.decoder import (
    DecoderInputs,
    DecoderOutput,
    GeoDecoder,
    PairRefiner,
    anchor_to_accident,
    decoder_inputs,
)
from crash_recon.services.encoder import SceneEncoder, SceneInputs, SceneLatents, featurize
from crash_recon.services.geometry import standardize_case
from crash_recon.services.objectives import LossInputs
from crash_recon.services.timing import TimingAllocator, TimingOutput

logger = logging.getLogger(__name__)


@dataclass
class PreparedCase:
    """A standardized case with its numeric model inputs"""
    case: AccidentCase
    scene: SceneInputs
    decoder: DecoderInputs

    @property
    def case_id(self) -> str:
        return self.case.case_id

    @property
    def supervision(self):
        return self.case.supervision


def prepare_case(case: AccidentCase, settings: Settings, use_supervision: bool = False) -> PreparedCase:
    """
    Standardize and featurize one case
    :param use_supervision: read the transition time and EDR speed priors from attached supervision (training only)
    """
    supervision = case.supervision
    case = standardize_case(case)
    if case.supervision is None and supervision is not None:
        case = case.model_copy(update={"supervision": supervision})
    scene = featurize(case, settings.encoder, settings.geometry)
    dec = decoder_inputs(case, scene, settings.decoder, settings.geometry.extent, use_supervision)
    return PreparedCase(case, scene, dec)


@dataclass
class ModelOutput:
    latents: SceneLatents
    decoded: DecoderOutput
    timing: TimingOutput

    @property
    def p_hat(self) -> Tensor:
        return self.timing.p_hat

    @property
    def v_hat(self) -> Tensor:
        return self.timing.v_hat

    def loss_inputs(self, prepared: PreparedCase) -> LossInputs:
        refinement = self.decoded.refinement
        case = prepared.case
        return LossInputs(
            p_hat=self.timing.p_hat,
            v_hat=self.timing.v_hat,
            tau=self.decoded.tau,
            valid=prepared.decoder.valid,
            pair=prepared.decoder.pair,
            accident=prepared.decoder.accident,
            r_hat=None if refinement is None else refinement.r_hat,
            avoidance=[v.avoidance for v in case.vehicles],
            speed_limit=prepared.decoder.speed_limit,
            reported_distance=case.annotations.reported_collision_distance,
        )


class ReconstructionModel(Module):
    """Encoder, geo-decoder, pair refiner and timing allocator; a parameter's group is its top-level name"""

    def __init__(self, settings: Settings, seed: Optional[int] = None):
        rng = np.random.default_rng(settings.seed if seed is None else seed)
        d = settings.encoder.d_model
        self.settings = settings
        self.encoder = SceneEncoder(settings.encoder, len(CATEGORY_ORDER), rng)
        self.decoder = GeoDecoder(settings.decoder, d, rng)
        self.pair = PairRefiner(settings.decoder, d, rng)
        self.timing = TimingAllocator(settings.timing, d, rng)

    def grouped_parameters(self) -> Dict[str, List[Tuple[str, Tensor]]]:
        groups: Dict[str, List[Tuple[str, Tensor]]] = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[name.split(".", 1)[0]].append((name, p))
        return groups

    def named_with_groups(self) -> List[Tuple[str, str, np.ndarray]]:
        return [(name, name.split(".", 1)[0], p.data) for name, p in self.named_parameters()]

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.data[...] = arrays[name]

    def hyperparameters(self) -> Dict[str, object]:
        """Architecture settings a checkpoint must agree with"""
        s = self.settings
        return {
            "encoder": s.encoder.model_dump(),
            "decoder": {k: v for k, v in s.decoder.model_dump().items()
                        if k in ("top_m", "control_points", "gt_layers", "gt_heads", "pair_layers")},
            "raster_size": s.geometry.raster_size,
            "max_polylines": s.geometry.max_polylines,
        }

    def __call__(self, prepared: PreparedCase, teacher_forcing: float = 0.0, pair_branch: bool = True,
                 freeze_encoder: bool = False) -> ModelOutput:
        if freeze_encoder:
            with no_grad():
                latents = self.encoder(prepared.scene)
        else:
            latents = self.encoder(prepared.scene)
        decoded = self.decoder(latents, prepared.decoder, teacher_forcing)
        if pair_branch and self.settings.decoder.use_pair_refinement:
            decoded = self.pair(latents, decoded, prepared.decoder)
        decoded = anchor_to_accident(decoded, prepared.decoder, self.settings.decoder)
        timing = self.timing(latents, decoded, prepared.decoder)
        return ModelOutput(latents, decoded, timing)


def load_model(path: Union[str, Path], settings: Settings) -> Tuple[ReconstructionModel, int]:
    """
    Rebuild a model from a checkpoint written by the trainer
    :return: model and the last completed stage
    """
    header, arrays = load_checkpoint(path)
    model = ReconstructionModel(settings)
    shapes = {name: p.data.shape for name, p in model.named_parameters()}
    check_compatible(header, model.hyperparameters(), shapes)
    model.load_arrays(arrays)
    logger.info(f"loaded checkpoint {path} (stage {header.stage}, {len(arrays)} tensors)")
    return model, header.stage
