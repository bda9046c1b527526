"""Three-stage training loop with per-group parameter updates.

Each iteration cycles through the decomposition, separation, and
reconstruction stages. A stage is an ordered list of sub-steps; every
sub-step computes one loss composition, backpropagates it, and steps only
its declared parameter groups, so everything else stays bitwise frozen.
Proposals are recomputed at each stage's entry.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch

from .boxes import AnnotatedBox, DomainBatch, ProposalSet
from .losses import (
    FocalConfig,
    LossReport,
    MISamplePair,
    MineEma,
    detection_loss,
    domain_focal_loss,
    mine_estimate,
    reconstruction_loss,
    relation_consistency_loss,
)
from .network import (
    PARAMETER_GROUPS,
    DisentangledDetector,
    DisentangledState,
    ModelConfig,
    roi_align,
)
from .synthdata import LoadedDataset, load_dataset

CHECKPOINT_FORMAT_VERSION = 1

ABLATION_VARIANTS = (
    "source-only",
    "stage1-only",
    "stages1-2",
    "stages1-3",
    "no-relation",
    "one-layer",
    "two-layers",
    "one-stage-all-losses",
)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    iterations_phase1: int = 3000
    iterations_phase2: int = 1000
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    momentum: float = 0.9
    source_per_step: int = 2
    target_per_step: int = 2
    seed: int = 0
    grl_coeff: float = 1.0
    top_k_train: int = 32
    top_k_eval: int = 16
    checkpoint_every: int = 1000
    detection_match_iou: float = 0.5
    grad_clip_norm: float = 5.0
    mine_momentum: float = 0.99
    mi_sample_cap: int = 512
    channel_means: tuple[float, float, float] = (0.5, 0.5, 0.5)
    loss_weights: dict = field(default_factory=dict)
    stages: tuple[str, ...] = ("fd", "fs", "fr")
    sequential_stages: bool = False
    one_stage: bool = False
    deterministic: bool = True

    @property
    def total_iterations(self) -> int:
        return self.iterations_phase1 + self.iterations_phase2

    def weight(self, term: str) -> float:
        if term in self.loss_weights:
            return float(self.loss_weights[term])
        if term.startswith("focal") and "focal" in self.loss_weights:
            return float(self.loss_weights["focal"])
        if term.startswith("mi") and "mi" in self.loss_weights:
            return float(self.loss_weights["mi"])
        return 1.0


@dataclass(frozen=True)
class SubStep:
    name: str
    update_groups: tuple[str, ...]


@dataclass(frozen=True)
class StagePlan:
    stage: str
    sub_steps: tuple[SubStep, ...]


def build_stage_plans(config: TrainConfig) -> tuple[StagePlan, ...]:
    """Stage plans for the active configuration.

    Sub-steps whose every loss weight is zero are dropped, as are the
    first-layer groups and terms when that layer is disabled.
    """
    layer1 = config.model.first_layer_enabled

    def groups(*names: str) -> tuple[str, ...]:
        excluded = () if layer1 else ("e_dir1", "e_dsr1", "c_ds1", "t1")
        return tuple(n for n in names if n not in excluded)

    focal_on = any(
        config.weight(f"focal_{c}") > 0 for c in ("c_b1", "c_ds1", "c_b2", "c_ds2")
    )
    mi_on = config.weight("mi1") > 0 or config.weight("mi2") > 0
    fd_steps = [SubStep("fd_det", groups("e_b1", "e_dir1", "e_b2", "e_dir2", "rpn", "d_b", "d_di"))]
    if focal_on:
        fd_steps.append(
            SubStep("fd_focal", groups("e_b1", "e_dsr1", "c_b1", "c_ds1", "e_b2", "e_dsr2", "c_b2", "c_ds2"))
        )
    fs_steps = [SubStep("fs_det", groups("e_dir1", "e_dir2", "d_di"))]
    if focal_on:
        fs_steps.append(SubStep("fs_focal", groups("e_dsr1", "c_ds1", "e_dsr2", "c_ds2")))
    if mi_on:
        fs_steps.append(SubStep("fs_mi_t", groups("t1", "t2")))
        fs_steps.append(SubStep("fs_mi_e", groups("e_dir1", "e_dsr1", "e_dir2", "e_dsr2")))
    if config.weight("relation") > 0:
        fs_steps.append(SubStep("fs_rel", ("e_dir2",)))
    fr_steps = [SubStep("fr_recon", ("e_dir2", "e_dsr2", "r"))]

    if config.one_stage:
        all_but_t = groups(*(g for g in PARAMETER_GROUPS if g not in ("t1", "t2")))
        steps: list[SubStep] = [SubStep("ow_main", all_but_t)]
        if mi_on:
            steps.append(SubStep("ow_mi_t", groups("t1", "t2")))
        return (StagePlan("ow", tuple(steps)),)

    by_name = {"fd": fd_steps, "fs": fs_steps, "fr": fr_steps}
    plans = []
    for stage in config.stages:
        if stage not in by_name:
            raise ValueError(f"unknown stage {stage!r}")
        if config.weight("reconstruction") == 0 and stage == "fr":
            continue
        plans.append(StagePlan(stage, tuple(by_name[stage])))
    return tuple(plans)


def normalize_images(images: torch.Tensor, channel_means: tuple[float, float, float]) -> torch.Tensor:
    means = torch.tensor(channel_means, dtype=torch.float32).view(1, 3, 1, 1)
    return images.float() / 255.0 - means


def _feature_rows(fmap: torch.Tensor) -> torch.Tensor:
    return fmap.permute(0, 2, 3, 1).reshape(-1, fmap.shape[1])


class Trainer:
    """Owns the model, one optimizer per parameter group, the moving
    averages of the MI estimators, and the random stream."""

    def __init__(self, config: TrainConfig, model: Optional[DisentangledDetector] = None):
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        self.config = config
        if model is None:
            torch.manual_seed(config.seed)
            model = DisentangledDetector(config.model)
        self.model = model
        self.generator = torch.Generator().manual_seed(config.seed)
        self.optimizers = {
            name: torch.optim.SGD(
                list(model.parameter_group(name)),
                lr=config.lr_phase1,
                momentum=config.momentum,
            )
            for name in PARAMETER_GROUPS
        }
        self.emas = {
            "t1": MineEma(momentum=config.mine_momentum),
            "t2": MineEma(momentum=config.mine_momentum),
        }
        self.plans = build_stage_plans(config)
        self.iteration = 0

    # -- schedule ----------------------------------------------------------

    def _learning_rate(self) -> float:
        if self.iteration < self.config.iterations_phase1:
            return self.config.lr_phase1
        return self.config.lr_phase2

    def _apply_learning_rate(self) -> None:
        lr = self._learning_rate()
        for opt in self.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr

    def _active_plans(self) -> tuple[StagePlan, ...]:
        if not self.config.sequential_stages or len(self.plans) <= 1:
            return self.plans
        phase_len = max(1, math.ceil(self.config.total_iterations / len(self.plans)))
        index = min(self.iteration // phase_len, len(self.plans) - 1)
        return (self.plans[index],)

    # -- one iteration -------------------------------------------------------

    def run_iteration(self, batch: DomainBatch) -> list[LossReport]:
        if batch.source_images.shape[0] < 1 or batch.target_images.shape[0] < 1:
            raise ValueError("batch needs at least one source and one target image")
        self._apply_learning_rate()
        reports = []
        for plan in self._active_plans():
            reports.append(self._run_stage(plan, batch))
        self.iteration += 1
        return reports

    def _run_stage(self, plan: StagePlan, batch: DomainBatch) -> LossReport:
        proposals = self._stage_proposals(batch)
        terms: dict[str, float] = {}
        skipped: list[str] = []
        for sub_step in plan.sub_steps:
            self._execute_sub_step(sub_step, batch, proposals, terms, skipped)
        return LossReport(stage=plan.stage, terms=terms, skipped=tuple(dict.fromkeys(skipped)))

    def _stage_proposals(self, batch: DomainBatch) -> dict[str, ProposalSet]:
        """Fresh proposals over the combined batch at stage entry.

        Returned sets use per-domain image indices (source images come
        first in the combined batch; target indices are shifted back).
        """
        n_s = batch.source_images.shape[0]
        state = self._forward_state(
            torch.cat([batch.source_images, batch.target_images]), "detached", ("di2",)
        )
        with torch.no_grad():
            props = self.model.propose(state.f_di2, self.config.top_k_train)
        source_mask = props.batch_index < n_s
        target = props.batch_index >= n_s
        return {
            "source": ProposalSet(
                props.boxes[source_mask],
                props.objectness[source_mask],
                props.batch_index[source_mask],
            ),
            "target": ProposalSet(
                props.boxes[target],
                props.objectness[target],
                props.batch_index[target] - n_s,
            ),
        }

    @contextmanager
    def _only_trainable(self, names: tuple[str, ...]):
        """Restrict parameter gradients to the given groups.

        Frozen modules still propagate input gradients, so cross-group
        paths stay intact; only their own parameters are held out. This
        makes the per-sub-step freezing contract mechanical.
        """
        keep = set(names)
        saved: list[tuple[torch.nn.Parameter, bool]] = []
        for group in PARAMETER_GROUPS:
            if group in keep:
                continue
            for p in self.model.parameter_group(group):
                saved.append((p, p.requires_grad))
                p.requires_grad_(False)
        try:
            yield
        finally:
            for p, flag in saved:
                p.requires_grad_(flag)

    def _execute_sub_step(self, sub_step, batch, proposals, terms, skipped) -> None:
        self.model.zero_grad(set_to_none=True)
        with self._only_trainable(sub_step.update_groups):
            loss = getattr(self, "_loss_" + sub_step.name)(batch, proposals, terms, skipped)
            if loss is None or not loss.requires_grad:
                return
            loss.backward()
        if self.config.grad_clip_norm > 0:
            updated = [
                p
                for name in sub_step.update_groups
                for p in self.model.parameter_group(name)
            ]
            torch.nn.utils.clip_grad_norm_(updated, self.config.grad_clip_norm)
        for name in sub_step.update_groups:
            self.optimizers[name].step()
        self.model.zero_grad(set_to_none=True)

    # -- sub-step losses -----------------------------------------------------

    def _crops(self, fmap: torch.Tensor, proposals: ProposalSet) -> torch.Tensor:
        cfg = self.config.model
        return roi_align(fmap, proposals, cfg.roi_size, cfg.feature_stride)

    def _detection_terms(
        self, batch, proposals, terms, skipped, heads: tuple[str, ...], with_rpn: bool, mode: str
    ):
        cfg = self.config
        state = self._forward_state(batch.source_images, mode, ("di2",))
        total = None
        if with_rpn:
            rpn = self.model.rpn_loss(state.f_di2, batch.source_annotations)
            terms["rpn"] = float(rpn.detach())
            total = cfg.weight("rpn") * rpn
        props = proposals["source"]
        if len(props) == 0:
            skipped.extend(f"detection_{h}" for h in heads)
            return total
        for head in heads:
            fmap = state.f_b2 if head == "b" else state.f_di2
            output = getattr(self.model, f"d_{head}")(self._crops(fmap, props))
            value = detection_loss(
                output, props, batch.source_annotations, cfg.detection_match_iou
            )
            terms[f"detection_{head}"] = float(value.detach())
            weighted = cfg.weight(f"detection_{head}") * value
            total = weighted if total is None else total + weighted
        return total

    _ALL_BRANCHES = ("di1", "ds1", "di2", "ds2")

    def _forward_state(
        self, images: torch.Tensor, mode: str, needs: tuple[str, ...] = _ALL_BRANCHES
    ) -> DisentangledState:
        """Forward pass trimmed to what a sub-step actually consumes.

        `needs` lists the branch maps to materialize (the trunk maps are
        always produced). `mode` controls gradient reach: "full"
        (everything differentiable), "layer1_detached" (the first trunk
        stage is a constant), "bases_detached" (both trunk maps are
        constants; only branch extractors build graph), "detached" (no
        graph). Feature values are identical across modes.
        """
        m = self.model
        layer1 = m.config.first_layer_enabled
        need = set(needs)
        if mode == "detached":
            with torch.no_grad():
                return self._forward_state(images, "full", needs)
        if mode == "bases_detached":
            with torch.no_grad():
                f_b1 = m.e_b1(images)
                f1 = f_b1 + m.e_dir1(f_b1) if layer1 else f_b1
                f_b2 = m.e_b2(f1)
            return DisentangledState(
                f_b1,
                m.e_dir1(f_b1) if layer1 and "di1" in need else None,
                m.e_dsr1(f_b1) if layer1 and "ds1" in need else None,
                f1,
                f_b2,
                m.e_dir2(f_b2) if "di2" in need else None,
                m.e_dsr2(f_b2) if "ds2" in need else None,
            )
        if mode not in ("full", "layer1_detached"):
            raise ValueError(f"unknown forward mode {mode!r}")
        if mode == "layer1_detached":
            with torch.no_grad():
                f_b1 = m.e_b1(images)
        else:
            f_b1 = m.e_b1(images)
        f_di1 = m.e_dir1(f_b1) if layer1 else None
        f_ds1 = m.e_dsr1(f_b1) if layer1 and "ds1" in need else None
        f1 = f_b1 + f_di1 if layer1 else f_b1
        f_b2 = m.e_b2(f1)
        return DisentangledState(
            f_b1,
            f_di1,
            f_ds1,
            f1,
            f_b2,
            m.e_dir2(f_b2) if "di2" in need else None,
            m.e_dsr2(f_b2) if "ds2" in need else None,
        )

    def _combined_state(self, batch: DomainBatch, mode: str, needs: tuple[str, ...] = _ALL_BRANCHES):
        state = self._forward_state(
            torch.cat([batch.source_images, batch.target_images]), mode, needs
        )
        return state, batch.source_images.shape[0]

    @staticmethod
    def _shifted(props: ProposalSet, offset: int) -> ProposalSet:
        if offset == 0 or len(props) == 0:
            return props
        return ProposalSet(props.boxes, props.objectness, props.batch_index + offset)

    def _focal_terms(self, batch, terms, classifiers: tuple[str, ...], mode: str):
        cfg = self.config
        state, n_s = self._combined_state(batch, mode, ("ds1", "ds2"))
        maps = {"c_b1": state.f_b1, "c_ds1": state.f_ds1,
                "c_b2": state.f_b2, "c_ds2": state.f_ds2}
        total = None
        for name in classifiers:
            if maps[name] is None:
                continue
            p = getattr(self.model, name)(maps[name], cfg.grl_coeff)
            value = domain_focal_loss(p[:n_s], 0, cfg.focal) + domain_focal_loss(
                p[n_s:], 1, cfg.focal
            )
            terms[f"focal_{name}"] = float(value.detach())
            weighted = cfg.weight(f"focal_{name}") * value
            total = weighted if total is None else total + weighted
        return total

    def _mi_pair(self, x_map: torch.Tensor, z_map: torch.Tensor) -> Optional[MISamplePair]:
        x = _feature_rows(x_map)
        z = _feature_rows(z_map)
        cap = self.config.mi_sample_cap
        if x.shape[0] > cap:
            idx = torch.randperm(x.shape[0], generator=self.generator)[:cap]
            x, z = x[idx], z[idx]
        if x.shape[0] < 2:
            return None
        perm = torch.randperm(x.shape[0], generator=self.generator)
        return MISamplePair(x, z, z[perm])

    def _mi_terms(self, batch, proposals, terms, skipped, record: bool, mode: str):
        """Both MI bounds, summed over the source and target batches.

        Layer one pairs branch features per spatial location; layer two
        pairs the branch crops of the stage proposals.
        """
        cfg = self.config
        state, n_s = self._combined_state(batch, mode)
        total = None
        mi1_value = 0.0
        mi2_value = 0.0
        mi2_present = False
        for domain, offset, bound in (("source", 0, n_s), ("target", n_s, None)):
            if state.f_di1 is not None and cfg.weight("mi1") > 0:
                sl = slice(offset, bound)
                pair = self._mi_pair(state.f_di1[sl], state.f_ds1[sl])
                if pair is not None:
                    value = mine_estimate(self.model.t1, pair, self.emas["t1"])
                    mi1_value += float(value.detach())
                    weighted = cfg.weight("mi1") * value
                    total = weighted if total is None else total + weighted
            props = self._shifted(proposals[domain], offset)
            if cfg.weight("mi2") > 0 and len(props) > 0:
                pair = self._mi_pair(
                    self._crops(state.f_di2, props), self._crops(state.f_ds2, props)
                )
                if pair is not None:
                    value = mine_estimate(self.model.t2, pair, self.emas["t2"])
                    mi2_value += float(value.detach())
                    mi2_present = True
                    weighted = cfg.weight("mi2") * value
                    total = weighted if total is None else total + weighted
        if record:
            if self.model.config.first_layer_enabled and cfg.weight("mi1") > 0:
                terms["mi1"] = mi1_value
            if cfg.weight("mi2") > 0:
                if mi2_present:
                    terms["mi2"] = mi2_value
                else:
                    skipped.append("mi2")
        return total

    def _loss_fd_det(self, batch, proposals, terms, skipped):
        return self._detection_terms(
            batch, proposals, terms, skipped, ("b", "di"), with_rpn=True, mode="full"
        )

    def _loss_fd_focal(self, batch, proposals, terms, skipped):
        return self._focal_terms(batch, terms, ("c_b1", "c_ds1", "c_b2", "c_ds2"), mode="full")

    def _loss_fs_det(self, batch, proposals, terms, skipped):
        return self._detection_terms(
            batch, proposals, terms, skipped, ("di",), with_rpn=False, mode="layer1_detached"
        )

    def _loss_fs_focal(self, batch, proposals, terms, skipped):
        return self._focal_terms(batch, terms, ("c_ds1", "c_ds2"), mode="bases_detached")

    def _loss_fs_mi_t(self, batch, proposals, terms, skipped):
        # Estimator ascent: features enter as constants, so only the
        # statistics networks receive gradient; the sign flip makes the
        # optimizer maximize the bound.
        loss = self._mi_terms(batch, proposals, {}, [], record=False, mode="detached")
        return -loss if loss is not None else None

    def _loss_fs_mi_e(self, batch, proposals, terms, skipped):
        return self._mi_terms(batch, proposals, terms, skipped, record=True, mode="layer1_detached")

    def _loss_fs_rel(self, batch, proposals, terms, skipped):
        state, n_s = self._combined_state(batch, "bases_detached", ("di2",))
        total = None
        value_sum = 0.0
        present = False
        for domain, offset in (("source", 0), ("target", n_s)):
            props = self._shifted(proposals[domain], offset)
            if len(props) == 0:
                continue
            value = relation_consistency_loss(
                self._crops(state.f_di2, props), self._crops(state.f_b2, props)
            )
            value_sum += float(value.detach())
            present = True
            weighted = self.config.weight("relation") * value
            total = weighted if total is None else total + weighted
        if present:
            terms["relation"] = value_sum
        else:
            skipped.append("relation")
        return total

    def _loss_fr_recon(self, batch, proposals, terms, skipped):
        state, n_s = self._combined_state(batch, "bases_detached", ("di2", "ds2"))
        total = None
        value_sum = 0.0
        present = False
        for domain, offset in (("source", 0), ("target", n_s)):
            props = self._shifted(proposals[domain], offset)
            if len(props) == 0:
                continue
            a_di = self._crops(state.f_di2, props)
            a_ds = self._crops(state.f_ds2, props)
            a_b = self._crops(state.f_b2, props).detach()
            value = reconstruction_loss(self.model.r(a_di, a_ds), a_b)
            value_sum += float(value.detach())
            present = True
            weighted = self.config.weight("reconstruction") * value
            total = weighted if total is None else total + weighted
        if present:
            terms["reconstruction"] = value_sum
        else:
            skipped.append("reconstruction")
        return total

    def _loss_ow_main(self, batch, proposals, terms, skipped):
        parts = [
            self._detection_terms(
                batch, proposals, terms, skipped, ("b", "di"), with_rpn=True, mode="full"
            ),
            self._focal_terms(batch, terms, ("c_b1", "c_ds1", "c_b2", "c_ds2"), mode="full"),
            self._mi_terms(batch, proposals, terms, skipped, record=True, mode="full"),
            self._loss_fs_rel(batch, proposals, terms, skipped),
            self._loss_fr_recon(batch, proposals, terms, skipped),
        ]
        parts = [p for p in parts if p is not None]
        return sum(parts) if parts else None

    def _loss_ow_mi_t(self, batch, proposals, terms, skipped):
        return self._loss_fs_mi_t(batch, proposals, terms, skipped)

    # -- checkpointing ---------------------------------------------------------

    def checkpoint_payload(self, extra: Optional[dict] = None) -> dict:
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "iteration": self.iteration,
            "model_config": dataclasses.asdict(self.config.model),
            "train_config": config_to_dict(self.config),
            "groups": {
                name: getattr(self.model, name).state_dict() for name in PARAMETER_GROUPS
            },
            "optimizers": {name: opt.state_dict() for name, opt in self.optimizers.items()},
            "mine_ema": {
                name: {"momentum": e.momentum, "log_denominator": e.log_denominator}
                for name, e in self.emas.items()
            },
            "generator_state": self.generator.get_state(),
        }
        if extra:
            payload.update(extra)
        return payload

    def restore(self, payload: dict) -> None:
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format {payload.get('format_version')!r}"
            )
        for name in PARAMETER_GROUPS:
            getattr(self.model, name).load_state_dict(payload["groups"][name])
        for name, opt in self.optimizers.items():
            opt.load_state_dict(payload["optimizers"][name])
        for name, raw in payload["mine_ema"].items():
            self.emas[name] = MineEma(
                momentum=raw["momentum"], log_denominator=raw["log_denominator"]
            )
        self.generator.set_state(payload["generator_state"])
        self.iteration = int(payload["iteration"])


def save_checkpoint(path: Path, payload: dict) -> None:
    """Atomic write: serialize to a temp file, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            torch.save(payload, handle)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: Path) -> dict:
    payload = torch.load(Path(path), weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {payload.get('format_version')!r}")
    return payload


def load_model(path: Path) -> tuple[DisentangledDetector, tuple[float, float, float]]:
    """Rebuild the detector from a checkpoint; returns it with the channel
    means it was trained under."""
    payload = load_checkpoint(path)
    model = DisentangledDetector(ModelConfig(**payload["model_config"]))
    for name in PARAMETER_GROUPS:
        getattr(model, name).load_state_dict(payload["groups"][name])
    model.eval()
    means = tuple(payload["train_config"].get("channel_means", (0.5, 0.5, 0.5)))
    return model, means


# -- config (de)serialization ----------------------------------------------


def config_to_dict(config: TrainConfig) -> dict:
    raw = dataclasses.asdict(config)
    raw["model"] = dataclasses.asdict(config.model)
    raw["focal"] = dataclasses.asdict(config.focal)
    return raw


def config_from_dict(raw: dict) -> TrainConfig:
    raw = dict(raw)
    model_raw = dict(raw.pop("model", {}))
    focal_raw = dict(raw.pop("focal", {}))
    known_model = {f.name for f in dataclasses.fields(ModelConfig)}
    known_focal = {f.name for f in dataclasses.fields(FocalConfig)}
    known_train = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in model_raw:
        if key not in known_model:
            raise ValueError(f"unknown model config key {key!r}")
    for key in focal_raw:
        if key not in known_focal:
            raise ValueError(f"unknown focal config key {key!r}")
    for key in raw:
        if key not in known_train:
            raise ValueError(f"unknown config key {key!r}")
    if "anchor_ratios" in model_raw:
        model_raw["anchor_ratios"] = tuple(model_raw["anchor_ratios"])
    if "channel_means" in raw:
        raw["channel_means"] = tuple(raw["channel_means"])
    if "stages" in raw:
        raw["stages"] = tuple(raw["stages"])
    return TrainConfig(
        model=ModelConfig(**model_raw), focal=FocalConfig(**focal_raw), **raw
    )


# -- end-to-end training -----------------------------------------------------


class _EpochSampler:
    """Shuffled epoch index stream driven by a torch generator."""

    def __init__(self, count: int, generator: torch.Generator, queue: Optional[list[int]] = None):
        self.count = count
        self.generator = generator
        self.queue: list[int] = list(queue) if queue else []

    def take(self, k: int) -> list[int]:
        while len(self.queue) < k:
            self.queue.extend(torch.randperm(self.count, generator=self.generator).tolist())
        out, self.queue = self.queue[:k], self.queue[k:]
        return out


@dataclass(frozen=True)
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    iterations: int


def make_batch(
    config: TrainConfig,
    source: LoadedDataset,
    target: LoadedDataset,
    source_indices: list[int],
    target_indices: list[int],
) -> DomainBatch:
    src = normalize_images(source.images[source_indices], config.channel_means)
    tgt = normalize_images(target.images[target_indices], config.channel_means)
    annotations = tuple(source.annotations[i] for i in source_indices)
    return DomainBatch(src, annotations, tgt)


def train(
    config: TrainConfig,
    source_dir: Path,
    target_dir: Path,
    out_dir: Path,
    resume_from: Optional[Path] = None,
) -> TrainResult:
    """Full training run over generated dataset directories.

    Writes a JSON-lines loss log (one line per stage per iteration),
    periodic checkpoints, and always a final checkpoint. Resuming from a
    checkpoint reproduces the uninterrupted trajectory bitwise under
    deterministic settings.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = load_dataset(Path(source_dir))
    target = load_dataset(Path(target_dir))
    size = config.model.image_size
    if source.images.shape[-1] != size or target.images.shape[-1] != size:
        raise ValueError("dataset image size does not match the model config")
    if not any(r.boxes for r in source.records):
        raise ValueError("source dataset carries no annotations")

    trainer = Trainer(config)
    sampler_s = _EpochSampler(len(source), trainer.generator)
    sampler_t = _EpochSampler(len(target), trainer.generator)
    log_path = out_dir / "train_log.jsonl"
    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        trainer.restore(payload)
        sampler_s.queue = list(payload.get("sampler_source", []))
        sampler_t.queue = list(payload.get("sampler_target", []))
        log = open(log_path, "a")
    else:
        log = open(log_path, "w")

    def write_checkpoint(path: Path) -> None:
        save_checkpoint(
            path,
            trainer.checkpoint_payload(
                {"sampler_source": sampler_s.queue, "sampler_target": sampler_t.queue}
            ),
        )

    final_path = out_dir / "checkpoint_final.pt"
    try:
        if resume_from is None:
            write_checkpoint(out_dir / "checkpoint_000000.pt")
            if config.total_iterations == 0:
                return TrainResult(out_dir / "checkpoint_000000.pt", log_path, 0)
        while trainer.iteration < config.total_iterations:
            batch = make_batch(
                config,
                source,
                target,
                sampler_s.take(config.source_per_step),
                sampler_t.take(config.target_per_step),
            )
            iteration = trainer.iteration
            reports = trainer.run_iteration(batch)
            for report in reports:
                log.write(json.dumps(report.as_json_dict(iteration), sort_keys=True) + "\n")
            log.flush()
            done = trainer.iteration
            if config.checkpoint_every and done % config.checkpoint_every == 0 and done < config.total_iterations:
                write_checkpoint(out_dir / f"checkpoint_{done:06d}.pt")
        write_checkpoint(final_path)
    finally:
        log.close()
    return TrainResult(final_path, log_path, trainer.iteration)


# -- ablation ------------------------------------------------------------------


def variant_config(config: TrainConfig, variant: str) -> TrainConfig:
    if variant == "source-only":
        weights = dict(config.loss_weights)
        weights["focal"] = 0.0
        return replace(config, stages=("fd",), loss_weights=weights)
    if variant == "stage1-only":
        return replace(config, stages=("fd",))
    if variant == "stages1-2":
        return replace(config, stages=("fd", "fs"))
    if variant in ("stages1-3", "two-layers"):
        return replace(config, stages=("fd", "fs", "fr"))
    if variant == "no-relation":
        weights = dict(config.loss_weights)
        weights["relation"] = 0.0
        return replace(config, stages=("fd", "fs", "fr"), loss_weights=weights)
    if variant == "one-layer":
        return replace(config, model=replace(config.model, first_layer_enabled=False))
    if variant == "one-stage-all-losses":
        return replace(config, one_stage=True)
    raise ValueError(f"unknown ablation variant {variant!r}; known: {ABLATION_VARIANTS}")


@dataclass(frozen=True)
class AblationRow:
    variant: str
    per_seed: dict[int, float]

    @property
    def mean(self) -> float:
        return sum(self.per_seed.values()) / len(self.per_seed)


def ablate(
    config: TrainConfig,
    variants: tuple[str, ...],
    seeds: tuple[int, ...],
    source_dir: Path,
    target_dir: Path,
    eval_dir: Path,
    out_dir: Path,
) -> list[AblationRow]:
    """Train each variant under each seed and score target-domain mAP.

    Emits the result table both as aligned text and as CSV under out_dir.
    """
    from .evalmetrics import evaluate  # deferred import; evaluate loads checkpoints

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        per_seed = {}
        for seed in seeds:
            run_config = replace(variant_config(config, variant), seed=seed)
            run_dir = out_dir / f"{variant.replace(' ', '_')}_seed{seed}"
            result = train(run_config, source_dir, target_dir, run_dir)
            scored = evaluate(result.checkpoint_path, eval_dir)
            per_seed[seed] = scored.mean_ap
        rows.append(AblationRow(variant=variant, per_seed=per_seed))
    _write_ablation_tables(out_dir, rows, seeds)
    return rows


def format_ablation_table(rows: list[AblationRow], seeds: tuple[int, ...]) -> str:
    width = max([len(r.variant) for r in rows] + [10])
    header = "variant".ljust(width) + "".join(f"  seed{s:>4}" for s in seeds) + "      mean"
    lines = [header]
    for r in rows:
        cells = "".join(f"  {r.per_seed[s]:8.4f}" for s in seeds)
        lines.append(r.variant.ljust(width) + cells + f"  {r.mean:8.4f}")
    return "\n".join(lines)


def _write_ablation_tables(out_dir: Path, rows: list[AblationRow], seeds: tuple[int, ...]) -> None:
    (out_dir / "ablation.txt").write_text(format_ablation_table(rows, seeds) + "\n")
    csv_lines = ["variant," + ",".join(f"seed{s}" for s in seeds) + ",mean"]
    for r in rows:
        csv_lines.append(
            ",".join([r.variant] + [repr(r.per_seed[s]) for s in seeds] + [repr(r.mean)])
        )
    (out_dir / "ablation.csv").write_text("\n".join(csv_lines) + "\n")
