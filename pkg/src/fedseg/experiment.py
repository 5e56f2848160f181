"""End-to-end experimental arms over synthetic multi-center data.

Four arms: local (per-center isolation), centralized (pooled data, the
upper-bound reference), ffe (shared global fingerprint + FedAvg) and asym
(native per-center architectures + asymmetric averaging). All arms share
identical split indices, init seeding and per-round shuffle seeds, so a
zero-round run yields identical models everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import (SyntheticCenterSpec, gen_center, prediction_to_native,
                   preprocess_case, split_indices)
from .errors import ConfigError
from .federation import _round_seed, run_federation
from .fingerprint import (GlobalFingerprint, aggregate_fingerprints,
                          extract_fingerprint, make_plan)
from .metrics import MetricsReport, dsc, hd95
from .model import SegModel
from .train import SgdTrainer, train_epoch

ARMS = ("local", "centralized", "ffe", "asym")


@dataclass
class ExperimentConfig:
    centers: list                      # SyntheticCenterSpec per center
    arms: list = field(default_factory=lambda: list(ARMS))
    rounds: int = 10
    lr: float = 0.05
    seed: int = 0
    matching_mode: str = "strict"
    weighted: bool = False
    shared_init: bool = True
    epochs_per_round: int = 1
    memory_budgets: dict = field(default_factory=dict)  # center_id -> bytes
    eval_fraction: float = 0.25
    hd95_units: str = "mm"
    transport: str = "sim"
    address: str = "127.0.0.1:0"
    output_path: str = None

    DEFAULT_BUDGET = 8 * 1024 ** 3

    def validate(self):
        if not self.centers:
            raise ConfigError("config field 'centers' must list >= 1 center")
        if self.rounds < 0:
            raise ConfigError("config field 'rounds' must be >= 0")
        for arm in self.arms:
            if arm not in ARMS:
                raise ConfigError(f"config field 'arms': unknown arm {arm!r}")
        if self.matching_mode not in ("strict", "subset"):
            raise ConfigError("config field 'matching_mode' must be "
                              "'strict' or 'subset'")
        if self.hd95_units not in ("mm", "px"):
            raise ConfigError("config field 'hd95_units' must be 'mm' or 'px'")
        if self.transport not in ("sim", "tcp"):
            raise ConfigError("config field 'transport' must be 'sim' or 'tcp'")
        if not (0.0 < self.eval_fraction < 1.0):
            raise ConfigError("config field 'eval_fraction' must be in (0,1)")
        ids = [c.center_id for c in self.centers]
        if len(set(ids)) != len(ids):
            raise ConfigError("config field 'centers': duplicate center_id")
        for cid, b in self.memory_budgets.items():
            if b <= 0:
                raise ConfigError(
                    f"config field 'memory_budgets': non-positive budget "
                    f"for center {cid}")
        return self

    def budget(self, center_id: int) -> int:
        return int(self.memory_budgets.get(center_id, self.DEFAULT_BUDGET))

    def to_dict(self):
        return {
            "centers": [c.to_dict() for c in self.centers],
            "arms": list(self.arms),
            "rounds": self.rounds,
            "lr": self.lr,
            "seed": self.seed,
            "matching_mode": self.matching_mode,
            "weighted": self.weighted,
            "shared_init": self.shared_init,
            "epochs_per_round": self.epochs_per_round,
            "memory_budgets": {str(k): int(v)
                               for k, v in self.memory_budgets.items()},
            "eval_fraction": self.eval_fraction,
            "hd95_units": self.hd95_units,
            "transport": self.transport,
            "address": self.address,
        }

    @classmethod
    def from_dict(cls, d):
        if "centers" not in d:
            raise ConfigError("config field 'centers' is required")
        arms = d.get("arms")
        if arms is None:
            arm = d.get("arm", "all")
            arms = list(ARMS) if arm == "all" else [arm]
        try:
            centers = [SyntheticCenterSpec.from_dict(c) for c in d["centers"]]
        except (KeyError, TypeError) as e:
            raise ConfigError(f"config field 'centers' malformed: {e}") from e
        cfg = cls(
            centers=centers,
            arms=arms,
            rounds=int(d.get("rounds", 10)),
            lr=float(d.get("lr", 0.05)),
            seed=int(d.get("seed", 0)),
            matching_mode=d.get("matching_mode", "strict"),
            weighted=bool(d.get("weighted", False)),
            shared_init=bool(d.get("shared_init", True)),
            epochs_per_round=int(d.get("epochs_per_round", 1)),
            memory_budgets={int(k): int(v)
                            for k, v in d.get("memory_budgets", {}).items()},
            eval_fraction=float(d.get("eval_fraction", 0.25)),
            hd95_units=d.get("hd95_units", "mm"),
            transport=d.get("transport", "sim"),
            address=d.get("address", "127.0.0.1:0"),
            output_path=d.get("output_path"),
        )
        return cfg.validate()


def train_standalone(plan, train_cases, *, lr, seed, node_id, rounds,
                     epochs_per_round=1, shared_init=True) -> SegModel:
    """The federation node's training loop without any federation."""
    init_seed = seed if shared_init else seed ^ node_id
    model = SegModel.create(plan, init_seed, node_id=node_id)
    pre = [preprocess_case(img, msk, sp, plan)
           for img, msk, sp in train_cases]
    images = np.stack([p[0] for p in pre])
    masks = np.stack([p[1] for p in pre])
    trainer = SgdTrainer(model, lr)
    for t in range(rounds):
        for e in range(epochs_per_round):
            train_epoch(trainer, images, masks, plan.batch_size,
                        _round_seed(seed, node_id, t, e))
    return model


def evaluate_model(model: SegModel, eval_cases, hd95_units: str = "mm"):
    """Per-case DSC and HD95 in the native image grid."""
    dice_scores, hd_scores = [], []
    for image, mask, spacing in eval_cases:
        img_p, _, ctx = preprocess_case(image, mask, spacing, model.plan)
        pred = prediction_to_native(model.predict_mask(img_p), ctx)
        dice_scores.append(dsc(pred, mask))
        sp = spacing if hd95_units == "mm" else (1.0, 1.0)
        hd_scores.append(hd95(pred, mask, sp))
    return dice_scores, hd_scores


def _center_data(cfg: ExperimentConfig):
    data = {}
    for spec in cfg.centers:
        cases = gen_center(spec)
        train_idx, eval_idx = split_indices(spec.num_cases,
                                            cfg.eval_fraction, cfg.seed)
        data[spec.center_id] = ([cases[i] for i in train_idx],
                                [cases[i] for i in eval_idx])
    return data


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    cfg.validate()
    data = _center_data(cfg)
    center_ids = sorted(data)
    report = MetricsReport(hd95_units=cfg.hd95_units)

    def record(arm, models_by_center):
        for cid in center_ids:
            scores = evaluate_model(models_by_center[cid], data[cid][1],
                                    cfg.hd95_units)
            report.add(arm, cid, *scores)

    for arm in cfg.arms:
        if arm == "local":
            models = {}
            for cid in center_ids:
                fp = extract_fingerprint(data[cid][0])
                plan = make_plan(GlobalFingerprint.from_local(fp, cid),
                                 cfg.budget(cid))
                models[cid] = train_standalone(
                    plan, data[cid][0], lr=cfg.lr, seed=cfg.seed,
                    node_id=cid, rounds=cfg.rounds,
                    epochs_per_round=cfg.epochs_per_round,
                    shared_init=cfg.shared_init)
            record(arm, models)
        elif arm == "centralized":
            contribs = [(cid, extract_fingerprint(data[cid][0]))
                        for cid in center_ids]
            global_fp = aggregate_fingerprints(contribs)
            plan = make_plan(global_fp,
                             max(cfg.budget(cid) for cid in center_ids))
            pooled = [case for cid in center_ids for case in data[cid][0]]
            model = train_standalone(
                plan, pooled, lr=cfg.lr, seed=cfg.seed,
                node_id=min(center_ids), rounds=cfg.rounds,
                epochs_per_round=cfg.epochs_per_round,
                shared_init=cfg.shared_init)
            record(arm, {cid: model for cid in center_ids})
        elif arm in ("ffe", "asym"):
            node_kwargs = {
                cid: dict(dataset=data[cid][0],
                          memory_budget=cfg.budget(cid), lr=cfg.lr,
                          seed=cfg.seed, shared_init=cfg.shared_init,
                          epochs_per_round=cfg.epochs_per_round)
                for cid in center_ids}
            _, node_results = run_federation(
                node_kwargs, strategy=arm, rounds=cfg.rounds,
                transport=cfg.transport,
                matching_mode=("strict" if arm == "ffe"
                               else cfg.matching_mode),
                weighted=cfg.weighted)
            record(arm, {cid: node_results[cid].model
                         for cid in center_ids})
    return report
