"""
Beamsim Experiment Harness
Baselines, SNR and refinement-step sweeps, test-set hashing and run manifests
"""

import json
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import scipy

from config.settings import get_settings
from models.experiment import ExperimentSpec
from models.results import Q_HEADER, SNR_HEADER, PowerStats, QRow, ResultTable, RunManifest, SnrRow
from services.channel import snr_to_sigma2
from services.errors import ConfigError
from services.hybrid import hybrid_power_normalize
from services.logging import get_logger
from services.monitoring import record_evaluation
from services.numerics import ComplexArray, RealArray, derive_seeds, ensure_finite, frobenius_sq
from services.rate import mmse_beamformer, refine, sum_rate
from services.records import records_sha256, save_channel_records
from services.scenario import ScenarioBatch, ScenarioSampler
from services.training import BeamformingSystem, run_algorithm1

logger = get_logger(__name__)

LEARNED_BASELINES = ("kd-edn", "unsupervised", "supervised", "kd-edn-q0")
CHECKPOINT_NAME = "checkpoint.bsck"

PathLike = Union[str, Path]


@dataclass
class BaselineOutcome:
    """Per-sample rates on the true channels and transmitted powers"""
    rates: RealArray
    power: RealArray

    @staticmethod
    def concatenate(outcomes: List["BaselineOutcome"]) -> "BaselineOutcome":
        return BaselineOutcome(rates=np.concatenate([o.rates for o in outcomes]),
                               power=np.concatenate([o.power for o in outcomes]))


def evaluate_rates(true_channels: ComplexArray, W: ComplexArray) -> RealArray:
    """Per-sample sum rates; the only place the harness computes a rate"""
    rates = np.atleast_1d(np.asarray(sum_rate(true_channels, W), dtype=np.float64))
    ensure_finite(rates, "evaluated sum rates")
    return rates


def transmitted_power(W: ComplexArray, analog: Optional[ComplexArray]) -> RealArray:
    return np.atleast_1d(frobenius_sq(W if analog is None else analog @ W))


def run_baseline_mmse(batch: ScenarioBatch, q_i: int, eta_ga: float, P: float,
                      project: bool = False) -> BaselineOutcome:
    """MMSE on the estimated channels, Q_i ascent steps on the estimated rate, rated on the true channels"""
    W0 = mmse_beamformer(batch.H_tilde, P)
    if batch.analog is not None:
        W0 = hybrid_power_normalize(W0, batch.analog, P)
    W = refine(W0, batch.H_tilde, eta_ga, q_i, project=project, P=P).final
    return BaselineOutcome(rates=evaluate_rates(batch.H, W), power=transmitted_power(W, batch.analog))


def run_baseline_learned(system: BeamformingSystem, batch: ScenarioBatch, q_i: int,
                         rng: np.random.Generator) -> BaselineOutcome:
    """Inference on a replica of the system; chunks may run on concurrent threads"""
    result = system.replica().infer(batch, q_i=q_i, rng=rng)
    return BaselineOutcome(rates=evaluate_rates(batch.H, result.W), power=transmitted_power(result.W, batch.analog))


def evaluate_chunked(
    evaluate: Callable[[ScenarioBatch, np.random.Generator], BaselineOutcome],
    batch: ScenarioBatch,
    seed: int,
    chunk_size: int,
    workers: int = 1,
) -> BaselineOutcome:
    """Evaluate fixed-size chunks with derived seeds; results do not depend on workers"""
    starts = list(range(0, batch.batch_size, chunk_size))
    seeds = derive_seeds(seed, len(starts))

    def work(i: int) -> BaselineOutcome:
        chunk = batch.subset(slice(starts[i], starts[i] + chunk_size))
        return evaluate(chunk, np.random.default_rng(seeds[i]))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(work, range(len(starts))))
    else:
        outcomes = [work(i) for i in range(len(starts))]
    return BaselineOutcome.concatenate(outcomes)


def baseline_spec(spec: ExperimentSpec, baseline: str) -> ExperimentSpec:
    """Experiment settings used to train one learned baseline"""
    updates = {
        "kd-edn": {},
        "unsupervised": {"kd_mode": "unsupervised"},
        "supervised": {"kd_mode": "supervised"},
        "kd-edn-q0": {"q_t": 0},
    }[baseline]
    return spec.model_copy(update={"train": spec.train.model_copy(update=updates)})


def baseline_q_i(spec: ExperimentSpec, baseline: str) -> int:
    return 0 if baseline == "kd-edn-q0" else spec.train.q_i


def checkpoint_path(directory: PathLike, baseline: str) -> Path:
    return Path(directory) / baseline / CHECKPOINT_NAME


def load_system(spec: ExperimentSpec, path: PathLike) -> BeamformingSystem:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing checkpoint; expected {path}")
    return BeamformingSystem.load(path, spec)


def obtain_systems(
    spec: ExperimentSpec,
    baselines: List[str],
    out_dir: Optional[PathLike] = None,
    checkpoint_dir: Optional[PathLike] = None,
) -> Dict[str, BeamformingSystem]:
    """Train every learned baseline once, or load them all in eval-only mode"""
    systems = {}
    for name in baselines:
        if name not in LEARNED_BASELINES:
            continue
        variant = baseline_spec(spec, name)
        if checkpoint_dir is not None:
            systems[name] = load_system(variant, checkpoint_path(checkpoint_dir, name))
            continue
        run_dir = Path(out_dir) / name if out_dir is not None else None
        systems[name], _ = run_algorithm1(variant, run_dir)
    return systems


def make_test_set(spec: ExperimentSpec, snr_db: float, seed: int, workers: int = 1) -> ScenarioBatch:
    sampler = ScenarioSampler(spec.scenario)
    return sampler.dataset(spec.eval.test_size, seed, workers, spec.eval.chunk_size, sigma2=snr_to_sigma2(snr_db))


def _test_seed(spec_seed: int, snr_db: float, seed: int) -> int:
    """Test sets depend on the evaluation seed and SNR only, so every baseline sees identical samples"""
    entropy = np.random.SeedSequence([spec_seed, seed & 0xFFFFFFFF, int(round(snr_db * 1000)) & 0xFFFFFFFF])
    return int(entropy.generate_state(1)[0])


def _summarize(per_seed: List[RealArray]) -> tuple[float, float, int]:
    rates = np.concatenate(per_seed)
    seed_means = [float(np.mean(r)) for r in per_seed]
    return float(np.mean(rates)), float(np.std(seed_means)), int(rates.size)


def _power_stats(power: List[RealArray]) -> PowerStats:
    values = np.concatenate(power)
    return PowerStats(mean=float(np.mean(values)), max=float(np.max(values)), min=float(np.min(values)))


def _versions() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


def _write_outputs(out_dir: Optional[PathLike], name: str, table: ResultTable, manifest: RunManifest) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    table.write(out / f"{name}.csv")
    (out / f"{name}_manifest.json").write_text(json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True),
                                               encoding="utf-8")
    logger.info("results_written", table=str(out / f"{name}.csv"), rows=len(table.rows))


class Evaluator:
    """Runs every baseline on shared, hashed test sets"""

    def __init__(self, spec: ExperimentSpec, systems: Dict[str, BeamformingSystem], workers: Optional[int] = None):
        self.spec = spec
        self.systems = systems
        self.workers = workers or get_settings().threads
        self.hashes: Dict[str, str] = {}
        self.power: Dict[str, List[RealArray]] = {}

    def test_set(self, snr_db: float, seed: int, save_dir: Optional[PathLike] = None) -> ScenarioBatch:
        batch = make_test_set(self.spec, snr_db, _test_seed(self.spec.seed, snr_db, seed), self.workers)
        key = f"snr{snr_db:g}_seed{seed}"
        if save_dir is not None:
            self.hashes[key] = save_channel_records(Path(save_dir) / f"test_{key}.bsch", batch)
        else:
            self.hashes[key] = records_sha256(batch)
        return batch

    def run(self, baseline: str, batch: ScenarioBatch, seed: int, q_i: Optional[int] = None,
            label: Optional[str] = None, system: Optional[BeamformingSystem] = None) -> BaselineOutcome:
        spec = self.spec
        if baseline == "mmse":
            q = spec.train.q_i if q_i is None else q_i

            def evaluate(chunk: ScenarioBatch, rng: np.random.Generator) -> BaselineOutcome:
                return run_baseline_mmse(chunk, q, spec.train.eta_ga, spec.system.P, spec.train.project)
        else:
            system = system or self.systems[baseline]
            q = baseline_q_i(spec, baseline) if q_i is None else q_i

            def evaluate(chunk: ScenarioBatch, rng: np.random.Generator) -> BaselineOutcome:
                return run_baseline_learned(system, chunk, q, rng)
        outcome = evaluate_chunked(evaluate, batch, seed, spec.eval.chunk_size, self.workers)
        self.power.setdefault(label or baseline, []).append(outcome.power)
        record_evaluation(baseline, outcome.rates.size)
        return outcome

    def manifest(self, command: str) -> RunManifest:
        return RunManifest(
            spec=self.spec.model_dump(mode="json"),
            seeds=list(self.spec.eval.seeds),
            versions=_versions(),
            test_set_sha256=dict(self.hashes),
            power={name: _power_stats(values) for name, values in self.power.items()},
            command=command,
        )


def sweep_snr(
    spec: ExperimentSpec,
    out_dir: Optional[PathLike] = None,
    checkpoint_dir: Optional[PathLike] = None,
    workers: Optional[int] = None,
    systems: Optional[Dict[str, BeamformingSystem]] = None,
    name: str = "sweep_snr",
) -> ResultTable:
    """One row per (baseline, SNR); learned models are trained once on the SNR mixture"""
    baselines = list(spec.eval.baselines)
    if systems is None:
        systems = obtain_systems(spec, baselines, out_dir, checkpoint_dir)
    evaluator = Evaluator(spec, systems, workers)
    table = ResultTable(header=SNR_HEADER)
    for snr_db in spec.eval.snr_db:
        batches = {seed: evaluator.test_set(snr_db, seed) for seed in spec.eval.seeds}
        for baseline in baselines:
            start_time = time.time()
            per_seed = [evaluator.run(baseline, batches[seed], seed).rates for seed in spec.eval.seeds]
            mean_rate, std_rate, count = _summarize(per_seed)
            row = SnrRow(baseline=baseline, snr_db=snr_db, mean_rate=mean_rate, std_rate=std_rate,
                         n_samples=count, seconds=time.time() - start_time)
            table.add(row)
            logger.info("sweep_row", sweep="snr", baseline=baseline, snr_db=snr_db, mean_rate=round(mean_rate, 6))
    _write_outputs(out_dir, name, table, evaluator.manifest(name))
    return table


def sweep_q(
    spec: ExperimentSpec,
    q_t_list: Optional[List[int]] = None,
    q_i_grid: Optional[List[int]] = None,
    snr_db: float = 15.0,
    out_dir: Optional[PathLike] = None,
    workers: Optional[int] = None,
    systems: Optional[Dict[int, BeamformingSystem]] = None,
) -> ResultTable:
    """Rows of (Q_t, Q_i, mean rate) for one KD-EDN per Q_t plus the MMSE-initialized curve"""
    q_t_list = list(spec.eval.q_t_list if q_t_list is None else q_t_list)
    q_i_grid = list(spec.eval.q_i_grid if q_i_grid is None else q_i_grid)
    if systems is None:
        systems = {}
        for q_t in q_t_list:
            variant = spec.model_copy(update={"train": spec.train.model_copy(update={"q_t": q_t})})
            run_dir = Path(out_dir) / f"kd-edn-qt{q_t}" if out_dir is not None else None
            systems[q_t], _ = run_algorithm1(variant, run_dir)
    evaluator = Evaluator(spec, {}, workers)
    batches = {seed: evaluator.test_set(snr_db, seed) for seed in spec.eval.seeds}
    table = ResultTable(header=Q_HEADER)

    models = [("mmse", 0)] + [("kd-edn", q_t) for q_t in q_t_list]
    for model, q_t in models:
        for q_i in q_i_grid:
            start_time = time.time()
            label = f"{model}-qt{q_t}"
            system = None if model == "mmse" else systems[q_t]
            per_seed = [evaluator.run(model, batches[seed], seed, q_i=q_i, label=label, system=system).rates
                        for seed in spec.eval.seeds]
            mean_rate, std_rate, count = _summarize(per_seed)
            table.add(QRow(model=model, q_t=q_t, q_i=q_i, mean_rate=mean_rate, std_rate=std_rate,
                           n_samples=count, seconds=time.time() - start_time))
            logger.info("sweep_row", sweep="q", model=model, q_t=q_t, q_i=q_i, mean_rate=round(mean_rate, 6))
    _write_outputs(out_dir, "sweep_q", table, evaluator.manifest("sweep_q"))
    return table


def evaluate_checkpoint(spec: ExperimentSpec, run_dir: PathLike, out_dir: Optional[PathLike] = None,
                        workers: Optional[int] = None) -> ResultTable:
    """SNR sweep of the KD-EDN checkpoint in run_dir against MMSE, written as eval.csv"""
    system = load_system(spec, Path(run_dir) / CHECKPOINT_NAME)
    eval_spec = spec.model_copy(update={"eval": spec.eval.model_copy(update={"baselines": ["kd-edn", "mmse"]})})
    return sweep_snr(eval_spec, out_dir=out_dir or run_dir, workers=workers, systems={"kd-edn": system}, name="eval")
