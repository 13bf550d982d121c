"""Discovery-quality scoring: IoU, cover rate, strategy comparison, ablations."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from ._binio import atomic_writer
from .core import (
    baseline_max_size,
    baseline_region_word,
    build_similarity_matrix,
    discover_prototype,
    heuristic_discovery,
    text_guide_weights,
)
from .corpus import ConceptGroupIndex
from .scenario import Scenario, ScenarioTruth
from .training import ModelState, TrainConfig, run_training

STRATEGIES = ("region_region", "region_word", "max_size", "heuristic")


@dataclass
class PseudoLabel:
    image_id: str
    concept_id: int
    region_index: int
    weight: float
    box: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.region_index < 0:
            raise ValueError("region index must be >= 0")
        if not 0.0 < self.weight <= 1.0:
            raise ValueError("assignment weight must be in (0, 1]")


@dataclass
class EvalReport:
    cover_rates: dict[str, float]
    per_concept: dict[str, dict[int, tuple[float, int]]]
    samples: int
    config_echo: dict


@dataclass
class AblationRow:
    axis: str
    value: object
    cover_rates: dict[str, float]


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    for box in (a, b):
        if box.shape != (4,) or box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {box!r}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def _label_covered(label: PseudoLabel, truth: ScenarioTruth, mode: str) -> bool:
    if mode == "index":
        return truth.is_true(label.image_id, label.region_index, label.concept_id)
    if mode == "box":
        if label.box is None:
            raise ValueError(f"label for image {label.image_id!r} carries no box")
        gt = truth.gt_boxes.get((label.image_id, label.concept_id), [])
        return bool(gt) and max(iou(label.box, g) for g in gt) > 0.5
    raise ValueError(f"unknown cover mode {mode!r}")


def cover_rate(labels: list[PseudoLabel], truth: ScenarioTruth, mode: str = "index") -> float:
    """Fraction of pseudo-labels matching oracle truth.

    index mode: the assigned region index is a true region of that concept.
    box mode: the assigned box has IoU > 0.5 with the closest (max-IoU)
    ground-truth box of that concept in that image.
    """
    if not labels:
        raise ValueError("cover_rate needs at least one label")
    hits = sum(1 for label in labels if _label_covered(label, truth, mode))
    return hits / len(labels)


def _sample_supports(pool: list[str], query_id: str, m: int,
                     rng: np.random.Generator) -> list[str]:
    others = [i for i in pool if i != query_id]
    if not others:
        return [query_id] * m
    replace = len(others) < m
    picks = rng.choice(len(others), size=m, replace=replace)
    return [others[int(i)] for i in picks]


def compare_strategies(
    state: ModelState,
    scenario: Scenario,
    index: ConceptGroupIndex,
    strategies=STRATEGIES,
    group_size: int = 8,
    seed: int = 0,
    mode: str = "index",
    text_guidance: bool = True,
) -> EvalReport:
    """Produce one pseudo-label per (concept, member image, strategy) and score
    cover rates. Every member image serves as query once, with supports
    resampled from its group under a fixed evaluation seed."""
    strategies = tuple(strategies)
    if not strategies:
        raise ValueError("strategies must be nonempty")
    for name in strategies:
        if name not in STRATEGIES:
            raise ValueError(f"unknown strategy {name!r}")
    rng = np.random.default_rng(seed)
    feature_map = scenario.feature_map()
    needs_matrix = bool({"region_region", "heuristic"} & set(strategies))
    labels: dict[str, list[PseudoLabel]] = {name: [] for name in strategies}
    for cid in index.concept_ids():
        row = state.classifier.row_of.get(cid)
        if row is None:
            raise ValueError(f"concept {cid} not in classifier")
        w_c = state.classifier.weights[row]
        guide = text_guide_weights(w_c) if text_guidance else np.ones(w_c.size)
        members = index.groups[cid]
        for query_id in members:
            features = state.features[query_id]
            support_ids = _sample_supports(members, query_id, group_size - 1, rng)
            s_matrix = None
            if needs_matrix:
                s_matrix = build_similarity_matrix(
                    features, [state.features[i] for i in support_ids], guide
                )
            boxes = feature_map[query_id].boxes
            for name in strategies:
                if name == "region_region":
                    proto = discover_prototype(s_matrix, state.head, features, query_id, cid)
                    idx = int(np.argmax(proto.p))
                    weight = float(proto.p[idx])
                elif name == "heuristic":
                    idx = heuristic_discovery(s_matrix)
                    weight = 1.0
                elif name == "region_word":
                    idx = baseline_region_word(features, w_c)
                    weight = 1.0
                else:
                    areas = feature_map[query_id].areas
                    if areas is None:
                        raise ValueError(f"image {query_id!r} has no areas for max_size")
                    idx = baseline_max_size(areas)
                    weight = 1.0
                box = boxes[idx].copy() if boxes is not None else None
                labels[name].append(PseudoLabel(query_id, cid, idx, weight, box))

    per_concept: dict[str, dict[int, tuple[float, int]]] = {}
    rates: dict[str, float] = {}
    for name in strategies:
        rates[name] = cover_rate(labels[name], scenario.truth, mode)
        by_concept: dict[int, tuple[float, int]] = {}
        for cid in index.concept_ids():
            subset = [lab for lab in labels[name] if lab.concept_id == cid]
            by_concept[cid] = (cover_rate(subset, scenario.truth, mode), len(subset))
        per_concept[name] = by_concept
    samples = len(next(iter(labels.values())))
    echo = {
        "strategies": list(strategies),
        "group_size": group_size,
        "seed": seed,
        "mode": mode,
        "text_guidance": text_guidance,
    }
    return EvalReport(rates, per_concept, samples, echo)


def ablate(
    index: ConceptGroupIndex,
    scenario: Scenario,
    base_config: TrainConfig,
    axis: str,
    values,
    strategies=("region_region",),
    eval_seed: int = 0,
    mode: str = "index",
) -> list[AblationRow]:
    """Train one variant per axis value with a shared seed and report final
    cover rates side by side. Axes: text_guidance (bool) or group_size (int)."""
    if axis not in ("text_guidance", "group_size"):
        raise ValueError(f"unknown ablation axis {axis!r}")
    rows = []
    for value in values:
        config = dataclasses.replace(base_config, **{axis: value})
        state, _ = run_training(index, scenario, config, eval_seed=eval_seed)
        report = compare_strategies(
            state, scenario, index, strategies, group_size=config.group_size,
            seed=eval_seed, mode=mode, text_guidance=config.text_guidance,
        )
        rows.append(AblationRow(axis, value, dict(report.cover_rates)))
    return rows


def write_report_json(report: EvalReport, path: str) -> None:
    doc = {
        "cover_rates": report.cover_rates,
        "per_concept": {
            name: {
                str(cid): {"cover_rate": rate, "samples": count}
                for cid, (rate, count) in sorted(by_concept.items())
            }
            for name, by_concept in report.per_concept.items()
        },
        "samples": report.samples,
        "config": report.config_echo,
    }
    with atomic_writer(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(report: EvalReport, path: str) -> None:
    """Flat per-concept rows: `strategy,concept_id,cover_rate,samples`."""
    with atomic_writer(path, "w") as fh:
        fh.write("strategy,concept_id,cover_rate,samples\n")
        for name in sorted(report.per_concept):
            for cid, (rate, count) in sorted(report.per_concept[name].items()):
                fh.write(f"{name},{cid},{rate!r},{count}\n")


def write_ablation_csv(rows: list[AblationRow], path: str) -> None:
    with atomic_writer(path, "w") as fh:
        fh.write("axis,value,strategy,cover_rate\n")
        for row in rows:
            for name in sorted(row.cover_rates):
                fh.write(f"{row.axis},{row.value},{name},{row.cover_rates[name]!r}\n")
