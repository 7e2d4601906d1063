"""
Pipeline - The central coordinator of a VerifScope run
Owns the configuration, the artifact layout under OUT_DIR and one method per stage
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from config.config_manager import ConfigManager
from core import numerics
from core.errors import ArgumentError, DataError, DependencyError
from core.model import HeadId, ModelConfig, TransformerModel, Weights
from core.weights_io import load_weights, save_weights, weights_digest
from analysis.emb2emb import fit_map, identity_pairing, rotate_model, transfer_rows
from analysis.glu import GluSelection, activation_report, antipodal_audit, save_rows, select_top_k
from analysis.heads import (
    PrevTokenHeadReport, alt_rankings, detect_prev_token_heads, n_sweep, ranking_rows,
    search_minimal_subset, threshold_sweep,
)
from analysis.lens import aggregate_lens, steer_generate, steer_markers
from analysis.probe import Probe, ProbeHyper, eval_probe, probe_accuracy_curve, probe_path, save_accuracy_curve
from countdown.corpus import Corpus, CorpusRecord, build_corpus, load_corpus, save_corpus
from countdown.instances import Instance
from countdown.tokenizer import Tokenizer
from countdown.transcript import Transcript, parse_transcript
from interventions.experiment import (
    EvalSample, make_evaluator, preregistered_plans, run_experiment, select_eval_samples,
)
from interventions.plan import Gating, InterventionPlan, Span, plan_positions
from traces.capture import capture as capture_trace
from traces.dataset import ProbeDataset, corpus_marker_datasets, dataset_from_store
from traces.store import TraceStore
from traces.trace import ActivationTrace, CaptureField, parse_selection
from training.trainer import TrainConfig, Trainer, save_history

SUMMARY_FILE = "summary.yaml"

# Stage name -> directory under OUT_DIR
STAGE_DIRS = {
    "gen-data": "data",
    "train": "model",
    "capture": "traces",
    "probe": "probes",
    "lens": "lens",
    "glu-select": "glu",
    "heads": "heads",
    "score-heads": "scores",
    "search-subset": "search",
    "intervene": "intervene",
    "steer": "steer",
    "transfer": "transfer",
    "report": "report",
}

PIPELINE_ORDER = (
    "gen-data", "train", "capture", "probe", "glu-select", "heads",
    "score-heads", "search-subset", "intervene", "report",
)

MODEL_FILE = "model.vsw"
SELECTION_FILE = "selection.yaml"
PREV_HEADS_FILE = "prev_heads.csv"
RANKINGS_FILE = "rankings.csv"
SUBSET_FILE = "subset.yaml"

STEER_EXAMPLES = 8


def _write_yaml(path: str, data: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=True)


def _read_yaml(path: str, producer: str) -> dict:
    if not os.path.exists(path):
        raise DependencyError(path, producer)
    with open(path, "r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


class Pipeline:
    """
    Runs the VerifScope stages against one configuration.
    Every stage reads its inputs from OUT_DIR, writes only its own directory
    and returns a response dictionary with a one-line summary.
    """

    def __init__(self, config: ConfigManager, force: bool = False):
        """
        Initialize the pipeline

        Args:
            config: Loaded run configuration
            force: Let report combine artifacts written under different configs
        """
        self.config = config
        self.out_dir = str(config.get("OUT_DIR"))
        self.digest = config.digest()
        self.force = force or bool(config.section("report").get("force"))
        self.threads = max(1, int(config.get("THREADS") or 1))
        self.tokenizer = Tokenizer()
        self.logger = logging.getLogger("VerifScope.Pipeline")
        self._model: Optional[TransformerModel] = None
        self._eval_samples: Dict[Tuple[int, int], List[EvalSample]] = {}
        self.logger.info(f"Pipeline on {self.out_dir} (config digest {self.digest[:12]})")

    # ------------------------------------------------------------------
    # Artifact plumbing
    # ------------------------------------------------------------------

    def path(self, stage: str, *parts: str) -> str:
        return os.path.join(self.out_dir, STAGE_DIRS[stage], *parts)

    def _require(self, path: str, producer: str) -> str:
        if not os.path.exists(path):
            raise DependencyError(path, producer)
        return path

    def _finish(self, stage: str, summary: Dict[str, Any], line: str) -> Dict[str, Any]:
        summary = dict(summary, stage=stage, digest=self.digest)
        _write_yaml(self.path(stage, SUMMARY_FILE), summary)
        self.logger.info(line)
        return {"stage": stage, "summary": line, "success": True, "details": summary}

    def _corpus(self) -> Corpus:
        return load_corpus(self.path("gen-data"), self.tokenizer)

    def _weights(self) -> Weights:
        path = self._require(self.path("train", MODEL_FILE), "train")
        recorded = weights_digest(path)
        if recorded != self.digest:
            self.logger.warning(f"{path} was trained under config {recorded[:12] or 'unknown'}")
        return load_weights(path)

    def model(self) -> TransformerModel:
        if self._model is None:
            self._model = TransformerModel(self._weights())
        return self._model

    def _store(self) -> TraceStore:
        store = TraceStore(self.path("capture"))
        store.read_index()
        return store

    def _transcripts(self, store: TraceStore) -> Dict[str, Transcript]:
        """Re-parse every captured sequence so timesteps come from the parser alone."""
        return {sid: parse_transcript(store.tokens(sid), self.tokenizer) for sid in store.sample_ids()}

    def _probes(self) -> Dict[int, Probe]:
        probes = {}
        for layer in range(self.model().config.n_layers):
            path = probe_path(self.path("probe"), layer)
            if os.path.exists(path):
                probes[layer] = Probe.load(path)
        if not probes:
            raise DependencyError(probe_path(self.path("probe"), 0), "probe")
        return probes

    def _probe_for_steering(self, probes: Dict[int, Probe]) -> Probe:
        layer = self.config.section("steer").get("probe_layer")
        if layer is None:
            return probes[max(probes)]
        if int(layer) not in probes:
            raise ArgumentError(f"steer.probe_layer={layer} has no trained probe")
        return probes[int(layer)]

    def _selection(self) -> GluSelection:
        return GluSelection.load(self._require(self.path("glu-select", SELECTION_FILE), "glu-select"))

    def _prev_reports(self) -> List[PrevTokenHeadReport]:
        path = self._require(self.path("heads", PREV_HEADS_FILE), "heads")
        frame = pd.read_csv(path)
        return [
            PrevTokenHeadReport(HeadId.parse(r["head"]), float(r["mass"]), int(r["samples"]), bool(r["flagged"]))
            for _, r in frame.iterrows()
        ]

    def _ranking(self, method: str) -> List[HeadId]:
        frame = pd.read_csv(self._require(self.path("score-heads", RANKINGS_FILE), "score-heads"))
        rows = frame[frame["method"] == method].sort_values("rank")
        if rows.empty:
            raise ArgumentError(f"No ranking for method {method!r}")
        return [HeadId.parse(h) for h in rows["head"]]

    def _subset(self) -> List[HeadId]:
        data = _read_yaml(self.path("search-subset", SUBSET_FILE), "search-subset")
        return [HeadId.parse(h) for h in data.get("heads", [])]

    def _gating(self) -> Tuple[Gating, Span]:
        sec = self.config.section("intervene")
        return Gating(sec["gating"]), Span(sec["span"])

    def _named_plan(self, name: str) -> InterventionPlan:
        gating, span = self._gating()
        selection = self._selection() if name.startswith("glu_") else None
        prev = [r.head for r in self._prev_reports() if r.flagged] if name == "prev_heads" else []
        subset = self._subset() if name == "minimal_subset" else []
        for plan in preregistered_plans(selection, prev, subset, gating, span):
            if plan.name == name:
                return plan
        raise ArgumentError(f"Unknown or empty plan {name!r}")

    def eval_samples(self, limit: int) -> List[EvalSample]:
        """Test-split instances the unintervened model solves and validates."""
        max_new = int(self.config.section("intervene")["max_new"])
        key = (limit, max_new)
        if key not in self._eval_samples:
            records = self._corpus().split("test")
            pairs = [(r.id, r.instance) for r in records]
            self._eval_samples[key] = select_eval_samples(self.model(), pairs, self.tokenizer, max_new, limit)
        return self._eval_samples[key]

    # ------------------------------------------------------------------
    # Stages
    # ------------------------------------------------------------------

    def gen_data(self) -> Dict[str, Any]:
        sec = self.config.section("data")
        corpus = build_corpus(
            sec["seed"], int(sec["count"]), self.tokenizer,
            n_failures_max=int(sec["n_failures_max"]),
            operand_counts=tuple(sec["operand_counts"]),
            val_fraction=float(sec["val_fraction"]),
            test_fraction=float(sec["test_fraction"]),
            digest=self.digest,
        )
        save_corpus(corpus, self.path("gen-data"))
        stats = corpus.stats()
        return self._finish("gen-data", stats, (
            f"gen-data: {len(corpus)} transcripts (train {stats['train']} / val {stats['val']} / "
            f"test {stats['test']}), {stats['attempts']} attempts"
        ))

    def train(self) -> Dict[str, Any]:
        corpus = self._corpus()
        model_config = ModelConfig.from_dict(self.config.section("model"))
        if model_config.vocab_size != self.tokenizer.vocab_size:
            raise ArgumentError(f"model.vocab_size={model_config.vocab_size} but the tokenizer has {self.tokenizer.vocab_size}")
        train_config = TrainConfig.from_section(self.config.section("train"))
        trainer = Trainer(model_config, train_config, self.tokenizer, self.threads)
        weights, history = trainer.train(corpus.split("train"), corpus.split("val"))
        save_weights(weights, self.path("train", MODEL_FILE), self.digest)
        save_history(history, self.path("train", "training_log.csv"))
        self._model = None
        best = min(history, key=lambda r: r.val_loss) if history else None
        summary = {
            "steps": int(history[-1].step) if history else 0,
            "best_val_loss": float(best.val_loss) if best else float("nan"),
            "format_accuracy": float(best.format_accuracy) if best else 0.0,
            "marker_accuracy": float(best.marker_accuracy) if best else 0.0,
        }
        return self._finish("train", summary, (
            f"train: {summary['steps']} steps, best val loss {summary['best_val_loss']:.4f}, "
            f"format {summary['format_accuracy']:.3f}, marker {summary['marker_accuracy']:.3f}"
        ))

    def capture(self) -> Dict[str, Any]:
        sec = self.config.section("capture")
        model = self.model()
        records = self._corpus().split(sec["split"])[: int(sec["samples"])]
        if not records:
            raise DataError(f"No {sec['split']} records to capture")
        selection = parse_selection(sec["fields"])
        store = TraceStore(self.path("capture"))

        def generate(record: CorpusRecord) -> List[int]:
            prompt = self.tokenizer.encode(record.prompt)
            budget = min(int(sec["max_new"]), model.config.max_seq_len - len(prompt))
            return model.generate(prompt, budget, stop_token=self.tokenizer.eos_id)

        if self.threads > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                generations = list(pool.map(generate, records))
        else:
            generations = [generate(r) for r in records]

        index = []
        for record, tokens in zip(records, generations):
            transcript = parse_transcript(tokens, self.tokenizer)
            trace = capture_trace(model, tokens, selection)
            trace.meta = {"sample_id": record.id, "digest": self.digest}
            store.add(record.id, trace)
            index.append({
                "id": record.id,
                "operands": list(record.instance.operands),
                "target": record.instance.target,
                "t_ans": transcript.t_ans,
                "t_valid": transcript.t_valid,
                "t_invalid": transcript.t_invalid,
                "validated": transcript.is_validated(),
                "out_of_range": transcript.out_of_range,
            })
        store.write_index(index, self.digest, {"fields": sorted(f.value for f in selection)})
        validated = sum(1 for entry in index if entry["validated"])
        summary = {"samples": len(index), "validated": validated, "fields": sorted(f.value for f in selection)}
        return self._finish("capture", summary, (
            f"capture: {len(index)} traces ({validated} validated) with {', '.join(summary['fields'])}"
        ))

    def probe(self) -> Dict[str, Any]:
        sec = self.config.section("probe")
        model = self.model()
        layers = list(range(model.config.n_layers))
        records = self._corpus().split("train")[: int(sec["corpus_samples"])]
        datasets = corpus_marker_datasets(model, records, layers)

        store = self._store()
        ids = store.sample_ids()
        if ids and store.has_field(ids[0], CaptureField.HIDDEN_STATES.value):
            transcripts = self._transcripts(store)
            for layer in layers:
                captured = dataset_from_store(store, transcripts, layer)
                datasets[layer] = ProbeDataset.concat([datasets[layer], captured], layer)
        else:
            self.logger.warning("Captured traces hold no hidden states; probing on the corpus alone")

        probes, rows = probe_accuracy_curve(datasets, ProbeHyper.from_section(sec))
        for layer, probe in probes.items():
            probe.save(probe_path(self.path("probe"), layer), self.digest)
        save_accuracy_curve(rows, self.path("probe", "accuracy.csv"))
        second_half = [r for r in rows if r["layer"] >= len(layers) // 2]
        above = sum(1 for r in second_half if r["val_accuracy"] >= 0.9)
        summary = {
            "layers": len(rows),
            "accuracy": {int(r["layer"]): float(r["val_accuracy"]) for r in rows},
            "second_half_above_90": above,
        }
        return self._finish("probe", summary, (
            f"probe: {len(rows)} probes, {above}/{len(second_half)} second-half layers at >= 90% accuracy"
        ))

    def lens(self) -> Dict[str, Any]:
        sec = self.config.section("lens")
        timestep_class = sec["timestep_class"]
        if timestep_class not in ("valid", "invalid"):
            raise ArgumentError(f"lens.timestep_class must be valid or invalid, got {timestep_class!r}")
        model = self.model()
        plan = self._named_plan(sec["plan"]) if sec.get("plan") else None
        store = self._store()
        transcripts = self._transcripts(store)
        n_layers = model.config.n_layers

        traces, positions = [], []
        for sid, transcript in transcripts.items():
            steps = transcript.t_valid if timestep_class == "valid" else transcript.t_invalid
            if not steps:
                continue
            if plan is None:
                hidden = np.stack([store.load_layer(sid, l, CaptureField.HIDDEN_STATES.value) for l in range(n_layers)])
                trace = ActivationTrace(tokens=transcript.tokens, hidden=hidden)
            else:
                mask = plan_positions(transcript.tokens, plan, self.tokenizer)
                trace = capture_trace(model, transcript.tokens, [CaptureField.HIDDEN_STATES], plan, mask)
            traces.append(trace)
            positions.append(steps)

        report = aggregate_lens(model, traces, positions, int(sec["top_k"]), timestep_class)
        suffix = f"_{plan.name}" if plan is not None else ""
        report.save(self.path("lens", f"lens_{timestep_class}{suffix}.csv"), self.tokenizer)
        last = report.top[n_layers - 1]
        top_token = self.tokenizer.piece(last[0][0]) if last else ""
        summary = {"samples": report.samples, "timestep_class": timestep_class, "plan": plan.name if plan else None}
        return self._finish("lens", summary, (
            f"lens: {report.samples} samples at t_{timestep_class}{' under ' + plan.name if plan else ''}, "
            f"final-layer top token {top_token!r}"
        ))

    def glu_select(self) -> Dict[str, Any]:
        sec = self.config.section("glu")
        weights = self._weights()
        layers = tuple(sec["layers"]) if sec.get("layers") is not None else None
        selection = select_top_k(weights, self._probes(), int(sec["k"]), layers, bool(sec["dedup"]))
        selection.save(self.path("glu-select", SELECTION_FILE), self.digest)
        audit = antipodal_audit(weights, selection, int(sec["neighbors"]), self.tokenizer)
        save_rows(audit["neighbors"], self.path("glu-select", "neighbors.csv"), [
            "vector", "polarity", "rank", "token", "similarity", "antipode_token", "antipode_similarity",
        ])
        _write_yaml(self.path("glu-select", "mechanism.yaml"), {k: float(v) if isinstance(v, float) else v for k, v in audit["mechanism"].items()})
        share = selection.budget_share(weights.config)
        summary = {
            "valid": len(selection.valid),
            "invalid": len(selection.invalid),
            "conflicts": selection.conflicts,
            "budget_share": float(share),
        }
        return self._finish("glu-select", summary, (
            f"glu-select: {len(selection.valid)} GLU_Valid + {len(selection.invalid)} GLU_Invalid vectors "
            f"({share:.2%} of all GLU_Out vectors), {selection.conflicts} conflicts"
        ))

    def heads(self) -> Dict[str, Any]:
        sec = self.config.section("heads")
        store = self._store()
        transcripts = self._transcripts(store)
        ids = list(transcripts)

        def attention_traces():
            for sid in ids:
                n_layers = int(store.manifest(sid)["n_layers"])
                attention = np.stack([
                    store.load_layer(sid, l, CaptureField.ATTENTION_PATTERNS.value) for l in range(n_layers)
                ])
                yield ActivationTrace(tokens=transcripts[sid].tokens, attention=attention)

        reports = detect_prev_token_heads(
            attention_traces(), (transcripts[sid] for sid in ids), float(sec["threshold"]), sec["pooling"],
        )
        save_rows(
            [{"head": str(r.head), "mass": r.mass, "samples": r.samples, "flagged": r.flagged} for r in reports],
            self.path("heads", PREV_HEADS_FILE), ["head", "mass", "samples", "flagged"],
        )
        sweep = threshold_sweep(reports, tuple(sec["sweep"]))
        save_rows(sweep, self.path("heads", "threshold_sweep.csv"), ["threshold", "count", "heads"])
        flagged = [str(r.head) for r in reports if r.flagged]
        summary = {"flagged": flagged, "sweep": {float(r["threshold"]): int(r["count"]) for r in sweep}}
        return self._finish("heads", summary, (
            f"heads: {len(flagged)} previous-token heads at {float(sec['threshold']):.1%}: {' '.join(flagged) or 'none'}"
        ))

    def score_heads(self) -> Dict[str, Any]:
        sec = self.config.section("heads")
        weights = self._weights()
        reports = self._prev_reports()
        candidates = [r.head for r in reports if r.flagged]
        if not candidates:
            self.logger.warning("No flagged previous-token heads; scoring every head")
            candidates = TransformerModel(weights).heads
        selection = self._selection()
        rankings = alt_rankings(
            weights, candidates, self._probes(), selection, reports,
            int(sec["n"]), int(sec["power_iterations"]), int(self.config.get("SEED") or 0),
        )
        save_rows(ranking_rows(rankings), self.path("score-heads", RANKINGS_FILE), ["method", "rank", "head", "score"])
        sweep = n_sweep(weights, candidates, selection, tuple(sec["n_sweep"]))
        save_rows(sweep, self.path("score-heads", "n_sweep.csv"), ["n", "rank", "head", "score"])
        top = [str(s.head) for s in rankings["eq8"][:3]]
        summary = {"candidates": len(candidates), "top_eq8": top}
        return self._finish("score-heads", summary, (
            f"score-heads: ranked {len(candidates)} heads, top {' '.join(top)}"
        ))

    def search_subset(self) -> Dict[str, Any]:
        sec = self.config.section("search")
        gating, span = self._gating()
        ranking = self._ranking(sec["method"])
        samples = self.eval_samples(int(sec["samples"]))
        max_new = int(self.config.section("intervene")["max_new"])
        evaluator = make_evaluator(self.model(), samples, self.tokenizer, max_new, gating, self.threads, span)
        result = search_minimal_subset(ranking, evaluator, int(sec["budget"]))
        heads = [str(h) for h in result.heads]
        _write_yaml(self.path("search-subset", SUBSET_FILE), {
            "heads": heads,
            "rate": float(result.rate),
            "complete": result.complete,
            "method": sec["method"],
            "samples": len(samples),
            "digest": self.digest,
        })
        save_rows(result.log, self.path("search-subset", "search_log.csv"), ["step", "head", "size", "rate"])
        summary = {"heads": heads, "rate": float(result.rate), "samples": len(samples)}
        return self._finish("search-subset", summary, (
            f"search-subset: {len(heads)} heads ({' '.join(heads)}) reach {result.rate:.1%} over {len(samples)} samples"
        ))

    def _activation_rows(self, selection: GluSelection, plan: InterventionPlan, samples: Sequence[EvalSample]) -> List[dict]:
        """GLU activations at t_valid of the original generations, plain and under `plan`."""
        model = self.model()
        before, after, positions = [], [], []
        for sample in samples:
            tokens = sample.original.tokens
            steps = sample.original.t_valid
            if not steps:
                continue
            plain = capture_trace(model, tokens, [CaptureField.GLU_ACTIVATIONS])
            mask = plan_positions(tokens, plan, self.tokenizer)
            planned = capture_trace(model, tokens, [CaptureField.GLU_ACTIVATIONS], plan, mask)
            # keep only the marker rows
            before.append(ActivationTrace(tokens=tokens, glu=plain.glu[:, steps]))
            after.append(ActivationTrace(tokens=tokens, glu=planned.glu[:, steps]))
            positions.append(list(range(len(steps))))
        return activation_report(selection, before, positions, after)

    def intervene(self) -> Dict[str, Any]:
        sec = self.config.section("intervene")
        gating, span = self._gating()
        selection = self._selection()
        prev = [r.head for r in self._prev_reports() if r.flagged]
        subset = self._subset()
        samples = self.eval_samples(int(sec["samples"]))
        plans = preregistered_plans(selection, prev, subset, gating, span)
        sizes = sorted({len(subset), len(prev)} - {0})
        report = run_experiment(
            self.model(), plans, samples, self.tokenizer, int(sec["max_new"]),
            baseline_sizes=sizes, baseline_seed=int(sec["seed"]),
            baseline_runs=int(sec["baseline_runs"]), threads=self.threads,
        )
        report.save(self.path("intervene"))
        if subset:
            subset_plan = next(p for p in plans if p.name == "minimal_subset")
            rows = self._activation_rows(selection, subset_plan, samples)
            save_rows(rows, self.path("intervene", "activation_report.csv"),
                      ["vector", "layer", "row", "polarity", "before", "after", "delta"])
        rates = {r.name: float(r.success_or_partial) for r in report.results}
        summary = {"samples": len(samples), "success_or_partial": rates}
        return self._finish("intervene", summary, "intervene: " + ", ".join(
            f"{name} {rate:.1%}" for name, rate in rates.items()
        ) + f" over {len(samples)} samples")

    def steer(self) -> Dict[str, Any]:
        sec = self.config.section("steer")
        model = self.model()
        probe = self._probe_for_steering(self._probes())
        store = self._store()
        transcripts = self._transcripts(store)
        chosen = [transcripts[sid] for sid in sorted(transcripts)[: int(sec["samples"])]]
        layers = sec.get("layers")
        alpha = float(sec["alpha"])

        toward_valid = steer_markers(model, chosen, self.tokenizer, probe.valid_direction, layers, alpha, True)
        toward_invalid = steer_markers(model, chosen, self.tokenizer, probe.invalid_direction, layers, alpha, False)
        rows = [
            dict(direction="valid", vector="W[1]", alpha=alpha, layer=probe.layer, **toward_valid.summary()),
            dict(direction="invalid", vector="W[0]", alpha=alpha, layer=probe.layer, **toward_invalid.summary()),
        ]
        save_rows(rows, self.path("steer", "steering.csv"),
                  ["direction", "vector", "alpha", "layer", "markers", "flipped", "flip_rate", "mean_margin_shift"])

        examples = []
        for sid in sorted(transcripts)[:STEER_EXAMPLES]:
            prompt = transcripts[sid].tokens[: transcripts[sid].prompt_len]
            budget = min(int(sec["max_new"]), model.config.max_seq_len - len(prompt))
            base = model.generate(prompt, budget, stop_token=self.tokenizer.eos_id)
            steered = steer_generate(model, prompt, probe.valid_direction, layers, alpha, budget, self.tokenizer.eos_id)
            examples.append({
                "sample_id": sid,
                "base": self.tokenizer.decode(base[len(prompt):]),
                "steered": self.tokenizer.decode(steered[len(prompt):]),
                "base_valid_markers": len(parse_transcript(base, self.tokenizer).t_valid),
                "steered_valid_markers": len(parse_transcript(steered, self.tokenizer).t_valid),
            })
        save_rows(examples, self.path("steer", "generations.csv"),
                  ["sample_id", "base", "steered", "base_valid_markers", "steered_valid_markers"])
        summary = {"layer": probe.layer, "alpha": alpha, "toward_valid": toward_valid.summary(),
                   "toward_invalid": toward_invalid.summary()}
        return self._finish("steer", summary, (
            f"steer: layer {probe.layer} alpha {alpha:g}, {toward_valid.flipped}/{toward_valid.markers} not->this, "
            f"{toward_invalid.flipped}/{toward_invalid.markers} this->not"
        ))

    def transfer(self) -> Dict[str, Any]:
        sec = self.config.section("transfer")
        steer_sec = self.config.section("steer")
        weights = self._weights()
        model = self.model()
        probe = self._probe_for_steering(self._probes())
        store = self._store()
        transcripts = self._transcripts(store)
        d = weights.config.d_model

        q = numerics.signed_permutation(d, np.random.default_rng(int(sec["seed"])))
        twin = TransformerModel(rotate_model(weights, q))
        pairing = identity_pairing(weights.config.vocab_size)
        self_map = fit_map(weights["embed"], weights["embed"], pairing, sec.get("n_sample"), int(sec["seed"]))
        emb_map = fit_map(weights["embed"], twin.weights["embed"], pairing, sec.get("n_sample"), int(sec["seed"]))
        emb_map.save(self.path("transfer", "map.vsw"), self.digest)

        # the captured sequences, re-run through the twin
        records = [
            CorpusRecord(sid, t.instance or Instance((), 0), "", "", "test", t)
            for sid, t in sorted(transcripts.items())
        ]
        native_set = corpus_marker_datasets(model, records, [probe.layer])[probe.layer]
        twin_set = corpus_marker_datasets(twin, records, [probe.layer])[probe.layer]
        moved = Probe(probe.layer, transfer_rows(emb_map, probe.W))
        native = eval_probe(probe, native_set)
        transferred = eval_probe(moved, twin_set)
        moved.val_accuracy = transferred
        moved.save(self.path("transfer", f"probe_layer{probe.layer}.vsw"), self.digest)

        layers = steer_sec.get("layers")
        alpha = float(steer_sec["alpha"])
        same = 0
        ids = sorted(transcripts)[:STEER_EXAMPLES]
        for sid in ids:
            prompt = transcripts[sid].tokens[: transcripts[sid].prompt_len]
            budget = min(int(steer_sec["max_new"]), model.config.max_seq_len - len(prompt))
            a = steer_generate(model, prompt, probe.valid_direction, layers, alpha, budget, self.tokenizer.eos_id)
            b = steer_generate(twin, prompt, moved.valid_direction, layers, alpha, budget, self.tokenizer.eos_id)
            same += int(a == b)

        summary = {
            "layer": probe.layer,
            "native_accuracy": float(native),
            "transferred_accuracy": float(transferred),
            "map_residual": float(emb_map.residual),
            "map_vs_rotation_max_error": float(np.max(np.abs(emb_map.T - q))),
            "identity_max_error": float(np.max(np.abs(self_map.T - np.eye(d)))),
            "steered_identical": same,
            "steered_compared": len(ids),
        }
        return self._finish("transfer", summary, (
            f"transfer: probe layer {probe.layer} native {native:.3f} vs twin {transferred:.3f}, "
            f"{same}/{len(ids)} steered generations identical"
        ))

    def report(self) -> Dict[str, Any]:
        stages, stale = {}, []
        for stage in STAGE_DIRS:
            if stage == "report":
                continue
            path = self.path(stage, SUMMARY_FILE)
            if not os.path.exists(path):
                continue
            summary = _read_yaml(path, stage)
            if summary.get("digest") != self.digest:
                stale.append(stage)
            stages[stage] = summary
        if not stages:
            raise DependencyError(self.path("gen-data", SUMMARY_FILE), "gen-data")
        if stale and not self.force:
            raise DependencyError(
                ", ".join(self.path(s, SUMMARY_FILE) for s in stale) + " (written under another config)", stale[0],
            )
        if stale:
            self.logger.warning(f"Combining artifacts from other configs: {', '.join(stale)}")

        rates_path = self.path("intervene", "interventions.csv")
        rates = []
        if os.path.exists(rates_path):
            frame = pd.read_csv(rates_path)
            for _, row in frame.iterrows():
                total = float(row["success"] + row["partial"] + row["failure"] + row["out_of_range"])
                if abs(total - 1.0) > 1e-6:
                    raise DataError(f"{rates_path}: rates of plan {row['plan']} sum to {total}")
                rates.append({k: (float(row[k]) if k != "plan" else str(row[k]))
                              for k in ("plan", "success", "partial", "failure", "out_of_range")})
        _write_yaml(self.path("report", "report.yaml"), {"digest": self.digest, "stages": stages, "rates": rates})
        summary = {"stages": sorted(stages), "stale": stale, "plans": len(rates)}
        return self._finish("report", summary, (
            f"report: {len(stages)} stages, {len(rates)} intervention plans"
            + (f", {len(stale)} stale (forced)" if stale else "")
        ))

    def run_all(self) -> Dict[str, Any]:
        """gen-data through report, stopping at the first failing stage."""
        lines = []
        for stage in PIPELINE_ORDER:
            response = self.stage(stage)()
            if not response.get("success"):
                self.logger.error(f"pipeline stopped at {stage}")
                return dict(response, lines=lines)
            lines.append(response["summary"])
        return {"stage": "pipeline", "summary": f"pipeline: {len(lines)} stages completed", "success": True,
                "details": {"stages": list(PIPELINE_ORDER)}, "lines": lines}

    def stage(self, name: str):
        """Bound method of one stage by its subcommand name."""
        if name == "pipeline":
            return self.run_all
        if name not in STAGE_DIRS:
            raise ArgumentError(f"Unknown stage {name!r}")
        return getattr(self, name.replace("-", "_"))
