"""Attribute transferability scoring and the attribute-count study.

The probe protocol: predict attributes for target test photos with a trained
model, retrain a fresh photo encoder + attribute head from scratch on those
predictions only, then measure per-attribute accuracy back on labeled source
data. Attributes whose semantics survived the round trip score high.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, UsageError
from .model import Model
from .synthdata import Corpus
from .training import (LossToggles, PipelineResult, RunPlan, TrainConfig, TrainSet,
                       run_pipeline, run_step1)

Array = np.ndarray


@dataclass
class AttributeReport:
    names: list[str]
    accuracies: Array  # fraction correct on source ground truth, per attribute
    ranking: list[int]  # attribute indices, descending accuracy
    selected: list[int]

    def to_dict(self) -> dict:
        return {"names": self.names,
                "accuracies": [float(a) for a in self.accuracies],
                "ranking": self.ranking, "selected": self.selected}


def derive_seed(*parts) -> int:
    """Stable 31-bit seed from arbitrary hashable parts."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") % (2 ** 31)


def predict_target_attributes(model: Model, photos: TrainSet) -> Array:
    """Thresholded binary predictions for a set of photos; 0.5 rounds up."""
    if model.c_att is None:
        raise UsageError("model has no attribute head; train with attribute losses first")
    emb, _ = model.e1.forward(photos.images(range(len(photos))), train=False)
    phi, _ = model.c_att.forward(emb, train=False)
    return (phi >= 0.5).astype(float)


def retrain_probe(target_photos: TrainSet, predicted_attributes: Array,
                  config: TrainConfig) -> Model:
    """Train a fresh photo encoder + attribute head on predicted attributes
    only (no identity loss, no adaptation). Never touches source images."""
    if len(predicted_attributes) != len(target_photos):
        raise ConfigurationError(
            f"{len(predicted_attributes)} attribute rows for {len(target_photos)} photos")
    probe_cfg = replace(
        config,
        toggles=LossToggles(id_s=False, tri_s=False, att_s=True),
        epochs_step1=config.epochs_step1,
        batch_source=min(config.batch_source, max(4, len(target_photos))),
        ids_per_batch=min(config.ids_per_batch, max(2, len(target_photos.identities))),
        attribute_subset=None)
    probe_set = TrainSet(target_photos.split, list(target_photos.indices),
                         attributes=predicted_attributes)
    result = run_step1(probe_cfg, probe_set, forbidden_splits=("source",))
    return result.model


def score_attributes(probe_model: Model, source: TrainSet,
                     names: list[str] | None = None) -> AttributeReport:
    """Per-attribute accuracy of the probe on labeled source data, with a
    descending ranking (ties broken by attribute index)."""
    emb, _ = probe_model.e1.forward(source.images(range(len(source))), train=False)
    phi, _ = probe_model.c_att.forward(emb, train=False)
    pred = (phi >= 0.5).astype(float)
    truth = source.attributes(range(len(source)))
    if pred.shape != truth.shape:
        raise ConfigurationError(
            f"probe predicts {pred.shape[1]} attributes, source has {truth.shape[1]}")
    acc = (pred == truth).mean(axis=0)
    ranking = sorted(range(len(acc)), key=lambda i: (-acc[i], i))
    names = names or [f"att{i}" for i in range(len(acc))]
    return AttributeReport(names=list(names), accuracies=acc, ranking=ranking,
                           selected=ranking)


def save_report(report: AttributeReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def select_attributes(corpus: Corpus, model: Model, config: TrainConfig) -> AttributeReport:
    """The full selection procedure against a model trained with all
    candidate non-color attributes."""
    test_split = corpus.splits["target_test"]
    photos = TrainSet(test_split, test_split.indices_for(domain="t1"))
    predicted = predict_target_attributes(model, photos)
    probe = retrain_probe(photos, predicted, config)
    source = TrainSet(corpus.splits["source"],
                      corpus.splits["source"].indices_for(domain="s"))
    return score_attributes(probe, source, names=corpus.attribute_names)


# ---------------------------------------------------------------------------
# attribute-count study


@dataclass
class SubsetStudyResult:
    per_k: dict = field(default_factory=dict)

    def mean_rank1(self, k: int) -> float:
        return self.per_k[k]["mean"]

    def to_dict(self) -> dict:
        return {str(k): v for k, v in self.per_k.items()}


def subset_study(corpus: Corpus, k_values, repeats: int, config: TrainConfig,
                 base_seed: int = 0) -> SubsetStudyResult:
    """Train the full pipeline on random k-subsets of the non-color
    attributes and record sketch-to-photo rank-1 per k.

    The run seed is derived from the chosen subset, so repeats that draw the
    same subset reproduce the same run (dispersion then measures subset
    choice, and k = n_attributes has zero dispersion).
    """
    noncolor = [i for i, c in enumerate(corpus.manifest["attribute_is_color"]) if not c]
    if max(k_values) > len(noncolor):
        raise UsageError(
            f"k up to {max(k_values)} requested but only {len(noncolor)} non-color attributes")
    cache: dict = {}
    result = SubsetStudyResult()
    for k in k_values:
        runs = []
        for r in range(repeats):
            pick_rng = np.random.default_rng(derive_seed("subset-pick", base_seed, k, r))
            subset = tuple(sorted(int(i) for i in pick_rng.choice(noncolor, size=k,
                                                                  replace=False)))
            run_seed = derive_seed("subset-run", base_seed, subset)
            key = (subset, run_seed)
            if key not in cache:
                cfg = replace(config, seed=run_seed, attribute_subset=subset)
                res: PipelineResult = run_pipeline(corpus, cfg, RunPlan())
                cache[key] = res.cmc["sketch_to_photo"].rank(1)
            runs.append({"subset": list(subset), "seed": run_seed, "rank1": cache[key]})
        vals = np.array([run["rank1"] for run in runs])
        std = 0.0 if np.ptp(vals) == 0 else float(vals.std())
        result.per_k[int(k)] = {"mean": float(vals.mean()), "std": std, "runs": runs}
    return result


def save_subset_study(result: SubsetStudyResult, path) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")
