"""Pluggable correction predictors and the coarse-to-fine cascade."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

from ..event_repr import AccumulationWindow, EventStream, ReprKind
from ..geometry import (DecalibRange, EulerPose, RigidTransform, apply_correction, correction_label,
                        pose_error)
from ..lidar_cam import Intrinsics, PointCloud, make_calib_input
from . import network as net
from .edge_align import edge_align_predict


@dataclass
class PredictContext:
    cloud: PointCloud
    events: EventStream
    hypothesis: RigidTransform
    K: Intrinsics
    window: AccumulationWindow
    search_range: DecalibRange
    seed: int = 0
    gt: RigidTransform | None = None


class Predictor(Protocol):
    name: str

    def __call__(self, ctx: PredictContext) -> EulerPose: ...


@dataclass
class IdentityPredictor:
    name: str = "identity"

    def __call__(self, ctx: PredictContext) -> EulerPose:
        return EulerPose()


@dataclass
class OraclePredictor:
    """Returns the exact correction; needs ground truth in the context."""

    name: str = "oracle"

    def __call__(self, ctx: PredictContext) -> EulerPose:
        if ctx.gt is None:
            raise ValueError("oracle predictor needs the ground-truth extrinsic")
        return correction_label(ctx.gt, ctx.hypothesis)


@dataclass
class EdgeAlignPredictor:
    repr_kind: ReprKind | str = ReprKind.EVENT_FRAME
    restarts: int = 8
    name: str = "edge-align"

    def __call__(self, ctx: PredictContext) -> EulerPose:
        return edge_align_predict(ctx.cloud, ctx.events, ctx.hypothesis, ctx.K, ctx.window,
                                  ctx.search_range, self.repr_kind, ctx.seed, self.restarts)


@dataclass
class RegressorPredictor:
    model: net.PredictorModel
    repr_kind: ReprKind | str = ReprKind.EVENT_FRAME
    name: str = "regressor"

    def __call__(self, ctx: PredictContext) -> EulerPose:
        inp = make_calib_input(ctx.cloud, ctx.events, ctx.hypothesis, ctx.K, ctx.window,
                               self.repr_kind)
        return net.predict(self.model, inp)


@dataclass
class CascadeConfig:
    stages: list[tuple[Predictor, DecalibRange]]
    iterations: int = 1

    def __post_init__(self):
        if not self.stages:
            raise ValueError("cascade needs at least one stage")
        if self.iterations < 1:
            raise ValueError("iterations per stage must be >= 1")
        for (_, a), (_, b) in zip(self.stages, self.stages[1:]):
            if not (b.max_rot_deg < a.max_rot_deg and b.max_trans_m < a.max_trans_m):
                raise ValueError("stage ranges must be strictly decreasing")


@dataclass
class StageTrace:
    stage: int
    iteration: int
    predictor: str
    correction: EulerPose
    estimate: RigidTransform
    error_cm: float | None = None
    error_deg: float | None = None


@dataclass
class CascadeResult:
    estimate: RigidTransform
    trace: list[StageTrace] = field(default_factory=list)
    initial_error: tuple[float, float] | None = None


def cascade_calibrate(cloud: PointCloud, events: EventStream, initial: RigidTransform,
                      config: CascadeConfig, K: Intrinsics, window: AccumulationWindow,
                      gt: RigidTransform | None = None, seed: int = 0) -> CascadeResult:
    """Run each stage's predictor and left-compose its correction onto the hypothesis."""
    hyp = initial
    res = CascadeResult(hyp, initial_error=pose_error(hyp, gt) if gt is not None else None)
    for s, (predictor, rng) in enumerate(config.stages):
        for it in range(config.iterations):
            ctx = PredictContext(cloud, events, hyp, K, window, rng,
                                 seed=(seed * 1009 + s * 31 + it) % 2**32, gt=gt)
            corr = predictor(ctx)
            hyp = apply_correction(corr, hyp)
            err = pose_error(hyp, gt) if gt is not None else (None, None)
            res.trace.append(StageTrace(s, it, predictor.name, corr, hyp, *err))
    res.estimate = hyp
    return res


def calibrate_sample(sample, config: CascadeConfig, K: Intrinsics | None = None,
                     window: AccumulationWindow | None = None, seed: int | None = None) -> CascadeResult:
    """Convenience wrapper for a simulator ``Sample``."""
    return cascade_calibrate(sample.cloud, sample.events, sample.decalibrated, config,
                             K or Intrinsics.default(), window or sample.window, sample.gt,
                             sample.scene_seed if seed is None else seed)
