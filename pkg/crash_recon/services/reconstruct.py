import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from crash_recon.core.config import Settings
from crash_recon.core.io import write_csv, write_json
from crash_recon.nn.autodiff import no_grad
from crash_recon.schemas.case import DT, HORIZON, K, MAX_SLOTS, time_grid
from crash_recon.schemas.training import ReconstructionDiagnostics, VehicleDiagnostics
from crash_recon.services.decoder import lane_summary
from crash_recon.services.geometry import march_along, nearest_on_lane
from crash_recon.services.model import PreparedCase, ReconstructionModel

logger = logging.getLogger(__name__)


@dataclass
class Reconstruction:
    """Reconstructed trajectories of one case in the north-up frame"""
    case_id: str
    positions: np.ndarray
    speeds: np.ndarray
    valid: np.ndarray
    diagnostics: ReconstructionDiagnostics

    def frame(self) -> pd.DataFrame:
        """Per-vehicle rows: vehicle, t, x, y, v"""
        t = time_grid()
        rows = []
        for slot in np.flatnonzero(self.valid):
            for k in range(K):
                rows.append({
                    "vehicle": int(slot),
                    "t": round(float(t[k]), 1),
                    "x": float(self.positions[slot, k, 0]),
                    "y": float(self.positions[slot, k, 1]),
                    "v": float(self.speeds[slot, k]),
                })
        return pd.DataFrame(rows, columns=["vehicle", "t", "x", "y", "v"])

    def save(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        path = write_csv(out_dir / f"{self.case_id}.csv", self.frame())
        write_json(out_dir / f"{self.case_id}.diagnostics.json", self.diagnostics.model_dump(mode="json"))
        return path


def reconstruct_case(model: ReconstructionModel, prepared: PreparedCase) -> Reconstruction:
    """Inference pass without teacher forcing"""
    with no_grad():
        out = model(prepared, teacher_forcing=0.0, pair_branch=True)
    decoded = out.decoded
    valid = prepared.decoder.valid
    vehicles = []
    for slot in range(MAX_SLOTS):
        if not valid[slot]:
            continue
        vd = decoded.vehicles[slot]
        vehicles.append(VehicleDiagnostics(
            slot=slot,
            tau=float(decoded.tau.data[slot]),
            gamma=float(decoded.gamma.data[slot]),
            anchor_free=bool(vd.anchor_free),
            start=tuple(float(x) for x in decoded.starts.data[slot]),
            **lane_summary(vd),
        ))
    refinement = decoded.refinement
    gates = {}
    if decoded.anchor_gates is not None:
        gates = {str(s): [float(g) for g in decoded.anchor_gates.data[s]] for s in range(MAX_SLOTS) if valid[s]}
    diagnostics = ReconstructionDiagnostics(
        case_id=prepared.case_id,
        vehicles=vehicles,
        pair=prepared.decoder.pair,
        pair_refined=refinement is not None,
        pair_gate=[] if refinement is None else [float(g) for g in refinement.gate.data],
        anchor_offset=None if decoded.anchor_offset is None else tuple(float(x) for x in decoded.anchor_offset.data),
        anchor_gates=gates,
        flags=list(decoded.flags),
    )
    return Reconstruction(prepared.case_id, out.p_hat.data.copy(), out.v_hat.data.copy(), valid.copy(), diagnostics)


def baseline_case(prepared: PreparedCase, settings: Settings) -> Reconstruction:
    """
    Lane-following at a constant speed (the speed limit, else the default pace), ending at the
    projection of the accident location onto the vehicle's lane. Without lanes, a straight line along the travel direction.
    """
    inputs = prepared.decoder
    case = prepared.case
    end_target = inputs.accident if inputs.accident is not None else inputs.center
    positions = np.zeros((MAX_SLOTS, K, 2))
    speeds = np.zeros((MAX_SLOTS, K))
    lanes = {lane.id: lane for lane in inputs.lanes}
    backwards = -time_grid()
    vehicles = []
    for slot in range(MAX_SLOTS):
        if not inputs.valid[slot]:
            continue
        speed = inputs.anchor_speed[slot]
        u = inputs.directions[slot] if inputs.direction_known[slot] else None
        lane = lanes.get(case.vehicles[slot].initial_lane or "")
        if lane is None and lanes:
            lane = min(lanes.values(), key=lambda ln: (nearest_on_lane(end_target, ln)[0], ln.id))
        if lane is not None:
            _, arc, tangent = nearest_on_lane(end_target, lane)
            sign = -1.0 if u is not None and float(np.dot(u, tangent)) < 0 else 1.0
            positions[slot] = march_along(lane.as_array(), arc - sign * speed * HORIZON, sign * speed * DT, K)
        else:
            u = u if u is not None else np.array([1.0, 0.0])
            positions[slot] = end_target - backwards[:, None] * speed * np.asarray(u)[None, :]
        speeds[slot] = speed
        vehicles.append(VehicleDiagnostics(slot=slot, tau=0.0, gamma=0.0, anchor_free=lane is None,
                                           start=tuple(float(x) for x in positions[slot, 0]),
                                           lane_id=None if lane is None else lane.id))
    diagnostics = ReconstructionDiagnostics(case_id=case.case_id, vehicles=vehicles, pair=inputs.pair,
                                            flags=["baseline"])
    return Reconstruction(case.case_id, positions, speeds, inputs.valid.copy(), diagnostics)


def reconstruct_many(model: Optional[ReconstructionModel], prepared: List[PreparedCase],
                     settings: Settings) -> List[Reconstruction]:
    """Model reconstructions, or the baseline when ``model`` is None"""
    out = []
    for p in prepared:
        out.append(baseline_case(p, settings) if model is None else reconstruct_case(model, p))
    logger.info(f"reconstructed {len(out)} cases{' with the baseline' if model is None else ''}")
    return out
