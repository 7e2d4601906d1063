"""
Intervention Experiments - Run plans over originally-validated samples
and compare them with size-matched random head baselines
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import DataError
from core.model import HeadId, TransformerModel
from analysis.glu import GluSelection
from countdown.instances import Instance, generation_prompt
from countdown.tokenizer import Tokenizer
from countdown.transcript import Transcript, parse_transcript
from interventions.outcome import LABELS, Outcome, OutcomeLabel, classify_outcome
from interventions.plan import Gating, InterventionPlan, Span, intervened_generate

logger = logging.getLogger("VerifScope.Experiment")

BASELINE_RUNS = 5
REPORT_COLUMNS = ["plan", "success", "partial", "failure", "out_of_range", "samples", "heads", "glu_vectors", "seeds"]
EVIDENCE_COLUMNS = ["plan", "sample_id", "operands", "target", "label", "generation"]


@dataclass
class EvalSample:
    sample_id: str
    instance: Instance
    prompt: List[int]
    original: Optional[Transcript] = None


@dataclass
class PlanResult:
    """Outcome counts of one plan (or the mean of a baseline family)"""

    name: str
    rates: Dict[OutcomeLabel, float]
    samples: int
    heads: int = 0
    glu_vectors: int = 0
    seeds: List[int] = field(default_factory=list)

    @property
    def success_or_partial(self) -> float:
        return self.rates[OutcomeLabel.SUCCESS] + self.rates[OutcomeLabel.PARTIAL_SUCCESS]

    def row(self) -> dict:
        return {
            "plan": self.name,
            "success": self.rates[OutcomeLabel.SUCCESS],
            "partial": self.rates[OutcomeLabel.PARTIAL_SUCCESS],
            "failure": self.rates[OutcomeLabel.FAILURE],
            "out_of_range": self.rates[OutcomeLabel.OUT_OF_RANGE],
            "samples": self.samples,
            "heads": self.heads,
            "glu_vectors": self.glu_vectors,
            "seeds": " ".join(str(s) for s in self.seeds),
        }


@dataclass
class InterventionReport:
    results: List[PlanResult]
    evidence: List[dict] = field(default_factory=list)

    def result(self, name: str) -> PlanResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def save(self, directory: str) -> Tuple[str, str]:
        os.makedirs(directory, exist_ok=True)
        report_path = os.path.join(directory, "interventions.csv")
        evidence_path = os.path.join(directory, "evidence.csv")
        pd.DataFrame([r.row() for r in self.results], columns=REPORT_COLUMNS).to_csv(
            report_path, index=False, float_format="%.8g"
        )
        pd.DataFrame(self.evidence, columns=EVIDENCE_COLUMNS).to_csv(evidence_path, index=False)
        return report_path, evidence_path


def _rates(outcomes: Sequence[Outcome]) -> Dict[OutcomeLabel, float]:
    n = len(outcomes)
    return {label: (sum(o.label is label for o in outcomes) / n if n else 0.0) for label in LABELS}


def select_eval_samples(
    model: TransformerModel,
    samples: Sequence[Tuple[str, Instance]],
    tokenizer: Tokenizer,
    max_new: int,
    limit: Optional[int] = None,
) -> List[EvalSample]:
    """
    Keep the instances the unintervened model solves and validates

    Raises:
        DataError: none qualifies
    """
    kept = []
    for sample_id, instance in samples:
        prompt = tokenizer.encode(generation_prompt(instance))
        budget = min(max_new, model.config.max_seq_len - len(prompt))
        generated = model.generate(prompt, budget, stop_token=tokenizer.eos_id)
        transcript = parse_transcript(generated, tokenizer)
        if any(a.is_valid for a in transcript.attempts if a.value == instance.target) and not transcript.out_of_range:
            kept.append(EvalSample(sample_id, instance, prompt, transcript))
            if limit is not None and len(kept) >= limit:
                break
    if not kept:
        raise DataError("No originally-validated samples to intervene on")
    logger.info(f"{len(kept)} of {len(samples)} instances are solved and validated without intervention")
    return kept


def run_plan(
    model: TransformerModel,
    plan: InterventionPlan,
    samples: Sequence[EvalSample],
    tokenizer: Tokenizer,
    max_new: int,
    threads: int = 1,
) -> Tuple[List[Outcome], List[List[int]]]:
    """Generate every sample under the plan and classify the results, in sample order."""

    def one(sample: EvalSample):
        generated = intervened_generate(model, plan, sample.prompt, max_new, tokenizer)
        return classify_outcome(generated, sample.instance, tokenizer), generated

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, samples))
    else:
        pairs = [one(s) for s in samples]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def random_head_plan(pool: Sequence[HeadId], size: int, seed: int, gating: Gating, span: Span = Span.MARKER) -> InterventionPlan:
    rng = np.random.default_rng(seed)
    size = min(size, len(pool))
    picks = sorted(rng.choice(len(pool), size=size, replace=False))
    heads = tuple(pool[int(i)] for i in picks)
    return InterventionPlan(heads=heads, gating=gating, name=f"random_{size}_seed{seed}", span=span)


def run_experiment(
    model: TransformerModel,
    plans: Sequence[InterventionPlan],
    samples: Sequence[EvalSample],
    tokenizer: Tokenizer,
    max_new: int = 100,
    baseline_sizes: Sequence[int] = (),
    baseline_seed: int = 0,
    baseline_runs: int = BASELINE_RUNS,
    threads: int = 1,
) -> InterventionReport:
    """
    Rates per plan plus random-head baselines

    Args:
        model: Base model; its weights are never modified
        plans: Plans to run
        samples: Originally-validated samples
        tokenizer: Vocabulary for gating and grading
        max_new: Generation budget per sample
        baseline_sizes: Head counts of the random baselines
        baseline_seed: First baseline seed; runs use consecutive seeds
        baseline_runs: Random plans averaged per baseline size

    Raises:
        DataError: empty sample set
    """
    if not samples:
        raise DataError("Intervention experiment needs at least one sample")
    report = InterventionReport(results=[])

    def record(plan: InterventionPlan, outcomes: Sequence[Outcome], generations: Sequence[List[int]]):
        for sample, outcome, generated in zip(samples, outcomes, generations):
            report.evidence.append({
                "plan": plan.name,
                "sample_id": sample.sample_id,
                "operands": " ".join(str(o) for o in sample.instance.operands),
                "target": sample.instance.target,
                "label": outcome.label.value,
                "generation": tokenizer.decode(generated[len(sample.prompt):]),
            })

    for plan in plans:
        outcomes, generations = run_plan(model, plan, samples, tokenizer, max_new, threads)
        record(plan, outcomes, generations)
        result = PlanResult(plan.name, _rates(outcomes), len(samples), len(plan.heads), len(plan.glu_vectors))
        report.results.append(result)
        logger.info(f"Plan {plan.name}: success+partial {result.success_or_partial:.3f} over {len(samples)} samples")

    gating = plans[0].gating if plans else Gating.AT_ATTEMPT_MARKERS
    for size in baseline_sizes:
        seeds = [baseline_seed + i for i in range(baseline_runs)]
        per_run = []
        for seed in seeds:
            plan = random_head_plan(model.heads, size, seed, gating)
            outcomes, generations = run_plan(model, plan, samples, tokenizer, max_new, threads)
            record(plan, outcomes, generations)
            per_run.append(_rates(outcomes))
        mean = {label: float(np.mean([r[label] for r in per_run])) for label in LABELS}
        result = PlanResult(f"random_{size}", mean, len(samples), size, 0, seeds)
        report.results.append(result)
        logger.info(f"Baseline random_{size}: success+partial {result.success_or_partial:.3f} (mean of {len(seeds)} runs)")
    return report


def preregistered_plans(
    selection: Optional[GluSelection],
    prev_heads: Sequence[HeadId],
    subset: Sequence[HeadId],
    gating: Gating = Gating.AT_ATTEMPT_MARKERS,
    span: Span = Span.MARKER,
) -> List[InterventionPlan]:
    """The GLU_Valid, GLU_Valid + GLU_Invalid, all previous-token heads and minimal subset plans."""
    plans = []
    if selection is not None:
        plans.append(InterventionPlan(glu_vectors=tuple(selection.valid), gating=gating, name="glu_valid", span=span))
        plans.append(InterventionPlan(
            glu_vectors=tuple(selection.valid) + tuple(selection.invalid),
            gating=gating, name="glu_valid_invalid", span=span,
        ))
    if prev_heads:
        plans.append(InterventionPlan(heads=tuple(prev_heads), gating=gating, name="prev_heads", span=span))
    if subset:
        plans.append(InterventionPlan(heads=tuple(subset), gating=gating, name="minimal_subset", span=span))
    return plans


def make_evaluator(
    model: TransformerModel,
    samples: Sequence[EvalSample],
    tokenizer: Tokenizer,
    max_new: int,
    gating: Gating = Gating.AT_ATTEMPT_MARKERS,
    threads: int = 1,
    span: Span = Span.MARKER,
) -> Callable[[List[HeadId]], float]:
    """Success + partial rate of ablating a head set, for subset search."""

    def evaluate(heads: List[HeadId]) -> float:
        plan = InterventionPlan(heads=tuple(heads), gating=gating, name="search", span=span)
        outcomes, _ = run_plan(model, plan, samples, tokenizer, max_new, threads)
        rates = _rates(outcomes)
        return rates[OutcomeLabel.SUCCESS] + rates[OutcomeLabel.PARTIAL_SUCCESS]

    return evaluate
