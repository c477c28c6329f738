"""
Stage orchestration: teacher training, pair generation, annealing reflow,
pair regeneration from the annealed student, flow-guided distillation and
evaluation. All artifacts live in the run's output directory.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from app.core.config import RunConfig, SolverConfig, TrainStageConfig, config_hash
from app.core.errors import (
    ContractError,
    DivergenceError,
    FingerprintMismatchError,
    IntegrationError,
    MissingPrerequisiteError,
    NumericFaultError,
    StageFailureError,
)
from app.models.artifacts import Checkpoint, LossRecord, PairSet
from app.models.reports import AblationReport, MetricsReport, SolverReport
from app.services import artifact_store as store
from app.services import flow_core, metrics
from app.services.networks import ConditionEncoder, VelocityModel, build_encoder, encoder_from_spec
from app.services.ode_solvers import solve, straightness
from app.services.tensor_engine import AdamState, Tensor, adam_step, backward, clear_tape, no_grad, zero_grad
from app.services.toy_data import class_of_tokens, sample_data, sample_noise, sample_tokens

TEACHER = "teacher"
ANNEAL = "anneal_reflow"
DISTILL = "distill"

# noise streams, distinct from the training-noise stream of toy_data
PAIR_NOISE_STREAM = 10
ANNEAL_NOISE_STREAM = 11
EVAL_NOISE_STREAM = 12
DISTILL_NOISE_STREAM = 13

STRAIGHTNESS_SAMPLES = 512

ONE_STEP = SolverConfig(kind="euler", euler_steps=1)


@dataclass
class FlowModel:
    """A velocity network plus the condition encoder it reads (None for unconditional data)"""
    velocity: VelocityModel
    encoder: Optional[ConditionEncoder] = None

    def encode(self, tokens: Optional[np.ndarray]) -> Optional[Tensor]:
        if self.encoder is None or tokens is None:
            return None
        return self.encoder(tokens)

    def encode_values(self, tokens: Optional[np.ndarray]) -> Optional[np.ndarray]:
        with no_grad():
            c = self.encode(tokens)
        return None if c is None else c.values

    def fingerprint(self) -> str:
        return store.model_fingerprint(self.velocity, self.encoder)

    def freeze(self) -> None:
        self.velocity.freeze()
        if self.encoder is not None:
            self.encoder.freeze()


class SampleResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    x1: np.ndarray
    tokens: Optional[np.ndarray] = None
    classes: Optional[np.ndarray] = None
    report: SolverReport


def _chunk_conditions(cond: Optional[np.ndarray], sl: slice) -> Optional[Tensor]:
    return None if cond is None else Tensor(cond[sl])


def _stage_learning_rate(stage_cfg: TrainStageConfig, iteration: int) -> float:
    if stage_cfg.lr_halve_at is not None and iteration >= stage_cfg.lr_halve_at:
        return 0.5 * stage_cfg.learning_rate
    return stage_cfg.learning_rate


class PipelineService:
    def __init__(self, run_config: RunConfig, write_config: bool = True):
        self.cfg = run_config
        self.output_dir: Path = run_config.output_path
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if write_config:
            _, self.config_hash = store.write_resolved_config(run_config)
        else:
            self.config_hash = config_hash(run_config)

    # --- paths ---

    def checkpoint_path(self, stage: str) -> Path:
        return self.output_dir / f"{stage}.ckpt.npz"

    def pairs_path(self, source: str) -> Path:
        return self.output_dir / f"pairs_{source}.bin"

    def loss_csv_path(self, stage: str) -> Path:
        return self.output_dir / f"{stage}_loss.csv"

    def metrics_path(self, stage: str, solver: SolverConfig) -> Path:
        suffix = f"euler{solver.euler_steps}" if solver.kind == "euler" else "rk45"
        return self.output_dir / f"metrics_{stage}_{suffix}.json"

    # --- models ---

    def _condition_dim(self) -> int:
        return self.cfg.model.condition_dim if self.cfg.dataset.conditional else 0

    def build_teacher(self) -> FlowModel:
        m, ds, seeds = self.cfg.model, self.cfg.dataset, self.cfg.seeds
        velocity = VelocityModel(ds.dim, m.teacher_width, m.depth, m.time_embed_dim, m.max_period,
                                 self._condition_dim(), seed=seeds.init)
        encoder = None
        if ds.conditional:
            rng = np.random.default_rng(np.random.SeedSequence([seeds.init, 1]))
            encoder = build_encoder(m, ds.vocab_size, ds.seq_len, rng)
        return FlowModel(velocity, encoder)

    def build_student(self) -> VelocityModel:
        m, ds = self.cfg.model, self.cfg.dataset
        return VelocityModel(ds.dim, m.student_width, m.depth, m.time_embed_dim, m.max_period,
                             self._condition_dim(), seed=self.cfg.seeds.init + 1)

    @staticmethod
    def _restore(flow: FlowModel, ckpt: Checkpoint) -> None:
        flow.velocity.load_state_dict(ckpt.model_state)
        if flow.encoder is not None:
            if ckpt.encoder_state is None:
                raise ContractError(f"{ckpt.stage} checkpoint has no encoder parameters")
            flow.encoder.load_state_dict(ckpt.encoder_state)

    def load_flow(self, stage: str) -> Tuple[FlowModel, Checkpoint]:
        """
        Load the finished model of a stage, frozen.

        Raises:
            MissingPrerequisiteError: the stage has no finished checkpoint
        """
        return self.load_flow_file(self.checkpoint_path(stage), stage)

    def load_flow_file(self, path: Path, stage: Optional[str] = None) -> Tuple[FlowModel, Checkpoint]:
        """Load a finished model from an explicit checkpoint file, frozen"""
        path = Path(path)
        ckpt = store.load_checkpoint(path, stage)
        if not ckpt.extra.get("complete", False):
            raise MissingPrerequisiteError(str(path), f"{ckpt.stage} stopped at iteration {ckpt.iteration}; rerun with --resume")
        velocity = VelocityModel.from_spec(ckpt.model_spec)
        encoder = encoder_from_spec(ckpt.encoder_spec) if ckpt.encoder_spec else None
        flow = FlowModel(velocity, encoder)
        self._restore(flow, ckpt)
        flow.freeze()
        return flow, ckpt

    # --- training loop ---

    def _save(self, stage: str, flow: FlowModel, iteration: int, optimizer: AdamState,
              records: List[LossRecord], complete: bool, extra: Optional[Dict] = None) -> Checkpoint:
        ckpt = Checkpoint(
            stage=stage,
            iteration=iteration,
            model_spec=flow.velocity.spec(),
            model_state=flow.velocity.state_dict(),
            encoder_spec=None if flow.encoder is None else flow.encoder.spec(),
            encoder_state=None if flow.encoder is None else flow.encoder.state_dict(),
            optimizer_state=optimizer.state_dict(),
            rng_state={"seeds": self.cfg.seeds.model_dump(), "next_iteration": iteration},
            config_hash=self.config_hash,
            fingerprint=flow.fingerprint(),
            extra={"complete": complete, **(extra or {})},
            loss_log=records,
        )
        store.save_checkpoint(self.checkpoint_path(stage), ckpt)
        return ckpt

    def _fit(self, stage: str, flow: FlowModel, params: List[Tensor], stage_cfg: TrainStageConfig,
             loss_fn: Callable[[int], Tuple[Tensor, float]], resume: bool,
             extra: Optional[Dict] = None) -> Checkpoint:
        iterations = stage_cfg.iterations
        block_params = [p for block in flow.velocity.blocks for p in block.parameters()]
        optimizer = AdamState(params, stage_cfg.learning_rate, stage_cfg.beta1, stage_cfg.beta2, stage_cfg.eps,
                              weight_decay=stage_cfg.block_weight_decay, decayed=block_params)
        path = self.checkpoint_path(stage)
        records: List[LossRecord] = []
        start = 0
        last_saved: Optional[str] = None

        if resume and path.exists():
            ckpt = store.load_checkpoint(path, stage)
            if ckpt.config_hash != self.config_hash:
                logger.warning(f"Resuming {stage} from a checkpoint written under a different config")
            self._restore(flow, ckpt)
            optimizer.load_state_dict(ckpt.optimizer_state)
            start = min(ckpt.iteration, iterations)
            records = [r for r in ckpt.loss_log if r.iteration < start]
            last_saved = str(path)
            logger.info(f"Resuming {stage} from iteration {start}")

        logger.info(f"Training {stage}: {flow.velocity.num_parameters()} parameters, "
                    f"iterations {start}..{iterations}")
        clock = time.perf_counter()
        elapsed_before = records[-1].wall_time if records else 0.0
        for k in range(start, iterations):
            zero_grad(params)
            optimizer.learning_rate = _stage_learning_rate(stage_cfg, k)
            try:
                loss, beta_value = loss_fn(k)
                value = loss.item()
                backward(loss)
                adam_step(params, [p.grad for p in params], optimizer)
            except NumericFaultError as e:
                clear_tape()
                logger.error(f"{stage} diverged at iteration {k}: {e}")
                raise DivergenceError(stage, k, last_saved) from e

            records.append(LossRecord(iteration=k, loss=value, beta=beta_value,
                                      wall_time=elapsed_before + time.perf_counter() - clock))
            done = k + 1
            if done % self.cfg.log_interval == 0:
                logger.info(f"{stage} {done}/{iterations}: loss={value:.6f} beta={beta_value:.3f}")
            if done % self.cfg.checkpoint_interval == 0 and done < iterations:
                self._save(stage, flow, done, optimizer, records, complete=False, extra=extra)
                last_saved = str(path)

        ckpt = self._save(stage, flow, iterations, optimizer, records, complete=True, extra=extra)
        store.write_loss_csv(self.loss_csv_path(stage), records)
        if records:
            logger.info(f"Finished {stage}: loss {records[0].loss:.6f} -> {records[-1].loss:.6f}")
        else:
            logger.info(f"Finished {stage}: no iterations, initialized model saved")
        return ckpt

    def _batch_indices(self, count: int, size: int, step: int, salt: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seeds.pairs, salt, step]))
        return rng.integers(count, size=size)

    # --- stages ---

    def train_teacher(self, resume: bool = False) -> Checkpoint:
        """Train the wide 1-rectified flow (and the condition encoder) on independent noise/data pairs"""
        ds, seeds = self.cfg.dataset, self.cfg.seeds
        stage_cfg = self.cfg.stages.teacher
        batch = stage_cfg.batch_size
        flow = self.build_teacher()
        params = flow.velocity.parameters() + ([] if flow.encoder is None else flow.encoder.parameters())
        times = flow_core.TimeSampler(seeds.time, stream=0)

        def loss_fn(k: int) -> Tuple[Tensor, float]:
            data = sample_data(ds, batch, seed=seeds.data, start=k * batch)
            x1 = sample_noise(batch, ds.dim, seeds.noise, start=k * batch)
            c = flow.encode(data.tokens)
            return flow_core.rf_loss(flow.velocity, data.x0, x1, c, times.draw(batch, k)), 0.0

        return self._fit(TEACHER, flow, params, stage_cfg, loss_fn, resume)

    def _integrate(self, model: VelocityModel, x1: np.ndarray, cond: Optional[np.ndarray],
                   solver: SolverConfig, chunk_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Solve in index-ordered chunks; a failing chunk is retried sample by sample"""
        n = x1.shape[0]
        chunks = [slice(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]

        def run(sl: slice) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
            size = sl.stop - sl.start
            try:
                report = solve(model, x1[sl], _chunk_conditions(cond, sl), solver)
                return report.endpoint, np.full(size, report.nfe), np.ones(size, dtype=bool)
            except IntegrationError as e:
                logger.debug(f"Chunk {sl.start}:{sl.stop} failed ({e}); solving its samples one by one")

            endpoints = np.zeros((size, x1.shape[1]))
            nfe = np.zeros(size, dtype=np.int64)
            ok = np.zeros(size, dtype=bool)
            for j, i in enumerate(range(sl.start, sl.stop)):
                c = None if cond is None else Tensor(cond[i:i + 1])
                try:
                    report = solve(model, x1[i:i + 1], c, solver)
                except IntegrationError as e:
                    logger.warning(f"Skipping pair record {i}: {e}")
                    continue
                endpoints[j], nfe[j], ok[j] = report.endpoint[0], report.nfe, True
            return endpoints, nfe, ok

        with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
            results = list(pool.map(run, chunks))
        endpoints = np.concatenate([r[0] for r in results])
        nfe = np.concatenate([r[1] for r in results])
        ok = np.concatenate([r[2] for r in results])
        return endpoints, nfe, ok

    def generate_pairs(self, source: str = TEACHER, n: Optional[int] = None,
                       solver: Optional[SolverConfig] = None, seed: Optional[int] = None) -> PairSet:
        """
        Integrate fresh noise through a trained model and persist the (x1, x0_hat, c) couplings.

        Args:
            source: Stage whose finished model generates the pairs
            n: Number of records (defaults to stages.gen_pairs.pair_count)
            solver: Solver configuration (defaults to the run's solver section)
            seed: Noise/condition seed (defaults to seeds.pairs)

        Raises:
            MissingPrerequisiteError: the source checkpoint does not exist
            StageFailureError: more than max_skip_fraction of the records failed to integrate
        """
        ds = self.cfg.dataset
        pair_cfg = self.cfg.stages.gen_pairs
        n = n or pair_cfg.pair_count
        solver = solver or self.cfg.solver
        seed = self.cfg.seeds.pairs if seed is None else seed
        flow, ckpt = self.load_flow(source)

        logger.info(f"Generating {n} pairs from {source} with {solver.kind}")
        start = time.perf_counter()
        x1 = sample_noise(n, ds.dim, seed, stream=PAIR_NOISE_STREAM)
        tokens = sample_tokens(ds, n, seed) if ds.conditional else None
        endpoints, nfe, ok = self._integrate(flow.velocity, x1, flow.encode_values(tokens), solver,
                                             pair_cfg.chunk_size)

        skipped = int(n - ok.sum())
        if skipped > pair_cfg.max_skip_fraction * n:
            logger.error(f"{skipped} of {n} pair records failed to integrate")
            raise StageFailureError(
                f"{skipped}/{n} pair records skipped, above the {pair_cfg.max_skip_fraction:.1%} limit"
            )

        pairs = PairSet(
            x1=x1[ok],
            x0_hat=endpoints[ok],
            tokens=None if tokens is None else tokens[ok],
            fingerprint=ckpt.fingerprint,
            solver=solver,
            skipped=skipped,
            mean_nfe=float(nfe[ok].mean()),
        )
        store.save_pairset(self.pairs_path(source), pairs)
        logger.info(f"Saved {pairs.count} pairs ({skipped} skipped, mean NFE {pairs.mean_nfe:.1f}) "
                    f"in {time.perf_counter() - start:.1f}s")
        return pairs

    def load_pairs(self, source: str) -> PairSet:
        """Load the pair set generated by `source`, checking it against that stage's checkpoint"""
        _, ckpt = self.load_flow(source)
        return store.load_pairset(self.pairs_path(source), expected_fingerprint=ckpt.fingerprint)

    def train_anneal_reflow(self, resume: bool = False, K_a_step: Optional[int] = None, tag: str = "") -> Checkpoint:
        """
        Train the narrow student on teacher pairs whose noise anneals from fresh to original.

        The condition encoder is copied from the teacher and frozen.

        Args:
            resume: Continue from the stage's latest checkpoint
            K_a_step: Override of stages.anneal_reflow.K_a_step (0 trains by plain reflow)
            tag: Suffix for the stage's artifacts (ablation arms)
        """
        stage = ANNEAL + tag
        ds, seeds = self.cfg.dataset, self.cfg.seeds
        stage_cfg = self.cfg.stages.anneal_reflow
        batch = stage_cfg.batch_size
        teacher, _ = self.load_flow(TEACHER)
        pairs = self.load_pairs(TEACHER)

        flow = FlowModel(self.build_student(), teacher.encoder)
        cond = flow.encode_values(pairs.tokens)
        sched = flow_core.AnnealSchedule(stage_cfg.K_a_step if K_a_step is None else K_a_step)
        times = flow_core.TimeSampler(seeds.time, stream=1)

        def loss_fn(k: int) -> Tuple[Tensor, float]:
            idx = self._batch_indices(pairs.count, batch, k, salt=1)
            x1_prime = sample_noise(batch, ds.dim, seeds.noise, start=k * batch, stream=ANNEAL_NOISE_STREAM)
            c = None if cond is None else Tensor(cond[idx])
            loss = flow_core.annealing_reflow_loss(flow.velocity, pairs.x1[idx], pairs.x0_hat[idx], c,
                                                   x1_prime, k, sched, times.draw(batch, k))
            return loss, flow_core.beta(k, sched)

        return self._fit(stage, flow, flow.velocity.parameters(), stage_cfg, loss_fn, resume,
                         extra={"K_a_step": sched.K_a_step})

    def _student_pairs(self, source: str, n: Optional[int]) -> PairSet:
        try:
            pairs = self.load_pairs(source)
            same_solver = pairs.solver.model_dump(exclude={"record_trajectory"}) == \
                self.cfg.solver.model_dump(exclude={"record_trajectory"})
            if not same_solver:
                logger.info(f"Regenerating pairs from {source}: solver settings changed")
            elif n is None or pairs.count + pairs.skipped == n:
                logger.info(f"Reusing {pairs.count} pairs regenerated from {source}")
                return pairs
        except (MissingPrerequisiteError, FingerprintMismatchError) as e:
            logger.info(f"Regenerating pairs from {source}: {e}")
        return self.generate_pairs(source=source, n=n)

    def train_distill(self, resume: bool = False, two_step: Optional[bool] = None, tag: str = "",
                      anneal_tag: str = "") -> Checkpoint:
        """
        Distill the annealed student into a one-step generator on pairs regenerated from it.

        The distilled model starts as a copy of the annealed student, which stays frozen as the
        two-step target. The two-step regularizer runs on fresh noise every iteration, so it is
        not limited to the stored pairs.

        Args:
            resume: Continue from the stage's latest checkpoint
            two_step: Override of stages.distill.two_step (False is naive distillation)
            tag: Suffix for this stage's artifacts
            anneal_tag: Suffix of the annealed student to distill
        """
        stage = DISTILL + tag
        source = ANNEAL + anneal_tag
        ds, seeds = self.cfg.dataset, self.cfg.seeds
        stage_cfg = self.cfg.stages.distill
        use_two_step = stage_cfg.two_step if two_step is None else two_step
        batch = stage_cfg.batch_size

        annealed, _ = self.load_flow(source)
        pairs = self._student_pairs(source, stage_cfg.pair_count or self.cfg.stages.gen_pairs.pair_count)
        flow = FlowModel(annealed.velocity.copy(), annealed.encoder)
        cond = flow.encode_values(pairs.tokens)
        times = flow_core.TimeSampler(seeds.time, stream=2)

        def loss_fn(k: int) -> Tuple[Tensor, float]:
            idx = self._batch_indices(pairs.count, batch, k, salt=2)
            c = None if cond is None else Tensor(cond[idx])
            x1_fresh = sample_noise(batch, ds.dim, seeds.noise, start=k * batch, stream=DISTILL_NOISE_STREAM)
            loss = flow_core.fg_distill_loss(annealed.velocity, flow.velocity, pairs.x1[idx], pairs.x0_hat[idx],
                                             c, times.draw(batch, k), two_step=use_two_step,
                                             x1_two_step=x1_fresh)
            return loss, 0.0

        return self._fit(stage, flow, flow.velocity.parameters(), stage_cfg, loss_fn, resume,
                         extra={"two_step": use_two_step, "source": source})

    # --- sampling and evaluation ---

    def _sample_flow(self, flow: FlowModel, n: int, solver: SolverConfig, seed: int) -> SampleResult:
        ds = self.cfg.dataset
        x1 = sample_noise(n, ds.dim, seed, stream=EVAL_NOISE_STREAM)
        tokens = sample_tokens(ds, n, seed) if ds.conditional else None
        classes = None if tokens is None else class_of_tokens(tokens, ds.vocab_size, ds.components)
        report = solve(flow.velocity, x1, _chunk_conditions(flow.encode_values(tokens), slice(0, n)), solver)
        return SampleResult(x=report.endpoint, x1=x1, tokens=tokens, classes=classes, report=report)

    def sample(self, stage: str, n: int, solver: Optional[SolverConfig] = None, seed: Optional[int] = None,
               trajectory: bool = False, checkpoint: Optional[Path] = None) -> SampleResult:
        """Generate n samples from a finished stage's model, or from an explicit checkpoint file"""
        solver = solver or self.cfg.solver
        if trajectory:
            solver = solver.model_copy(update={"record_trajectory": True})
        flow, _ = self.load_flow(stage) if checkpoint is None else self.load_flow_file(checkpoint)
        return self._sample_flow(flow, n, solver, self.cfg.seeds.eval if seed is None else seed)

    def reference_data(self, n: int) -> np.ndarray:
        return sample_data(self.cfg.dataset, n, seed=self.cfg.seeds.eval).x0

    def evaluate(self, stage: str, solver: Optional[SolverConfig] = None, n: Optional[int] = None,
                 write: bool = True, checkpoint: Optional[Path] = None) -> MetricsReport:
        """
        Sample from a stage, compare with fresh reference data and attach straightness and efficiency.

        Args:
            checkpoint: Evaluate this checkpoint file instead of the stage's own; the report is
                then labelled with the stage recorded in the file

        Returns:
            MetricsReport, also written to metrics_<stage>_<solver>.json when write is set
        """
        solver = solver or self.cfg.solver
        mcfg = self.cfg.metrics
        n = n or mcfg.n_samples
        if checkpoint is None:
            flow, _ = self.load_flow(stage)
        else:
            flow, ckpt = self.load_flow_file(checkpoint)
            stage = ckpt.stage
        result = self._sample_flow(flow, n, solver, self.cfg.seeds.eval)

        subset = min(n, STRAIGHTNESS_SAMPLES)
        cond = flow.encode_values(result.tokens)
        straight = straightness(flow.velocity, result.x1[:subset], _chunk_conditions(cond, slice(0, subset)),
                                mcfg.probe_steps)
        m = min(n, mcfg.efficiency_samples)
        efficiency = metrics.efficiency_probe(flow.velocity, solver, result.x1[:m], None if cond is None else cond[:m])

        report = metrics.build_report(
            result.x, self.reference_data(n), mcfg.n_projections, self.cfg.seeds.eval,
            straightness=straight, efficiency=efficiency,
            config_echo={"stage": stage, "solver": solver.model_dump(mode="json"), "config_hash": self.config_hash},
        )
        if write:
            path = store.write_json_model(self.metrics_path(stage, solver), report)
            logger.info(f"Wrote {path}")
        logger.info(f"{stage} [{solver.kind}]: FD-analog={report.frechet_gauss:.4f} "
                    f"SW={report.sliced_wasserstein:.4f} straightness={straight:.4f} NFE={efficiency.mean_nfe:.1f}")
        return report

    def evaluate_samples(self, samples: np.ndarray) -> MetricsReport:
        """Compare externally generated samples with fresh reference data"""
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if samples.shape[1] != self.cfg.dataset.dim:
            raise ContractError(
                f"samples have dimension {samples.shape[1]}, reference dataset has {self.cfg.dataset.dim}"
            )
        return metrics.build_report(samples, self.reference_data(samples.shape[0]),
                                    self.cfg.metrics.n_projections, self.cfg.seeds.eval,
                                    config_echo={"dataset": self.cfg.dataset.model_dump(mode="json")})

    # --- drivers ---

    def run_all(self, resume: bool = False) -> Dict[str, MetricsReport]:
        """Teacher -> pairs -> annealing reflow -> distillation, then evaluate teacher and student"""
        logger.info(f"Running full pipeline in {self.output_dir}")
        self.train_teacher(resume=resume)
        self.generate_pairs(TEACHER)
        self.train_anneal_reflow(resume=resume)
        self.train_distill(resume=resume)
        return {
            "teacher_rk45": self.evaluate(TEACHER, self.cfg.solver),
            "distill_euler1": self.evaluate(DISTILL, ONE_STEP),
            "distill_euler4": self.evaluate(DISTILL, SolverConfig(kind="euler", euler_steps=4)),
        }

    def run_ablation(self, include_no_anneal: bool = False) -> AblationReport:
        """
        One-step FD-analog of each distillation arm: flow-guided, naive (no two-step term) and none.

        Needs a finished anneal_reflow checkpoint; the flow-guided arm reuses an existing distill
        checkpoint when it trained with the two-step term.
        """
        try:
            _, ckpt = self.load_flow(DISTILL)
            if not ckpt.extra.get("two_step", True):
                raise MissingPrerequisiteError(str(self.checkpoint_path(DISTILL)), "trained without two-step term")
        except MissingPrerequisiteError:
            self.train_distill(two_step=True)
        self.train_distill(two_step=False, tag="_naive")

        no_anneal = None
        if include_no_anneal:
            self.train_anneal_reflow(K_a_step=0, tag="_no_anneal")
            self.train_distill(two_step=True, tag="_no_anneal", anneal_tag="_no_anneal")
            no_anneal = self.evaluate(DISTILL + "_no_anneal", ONE_STEP)

        report = AblationReport(
            fg_distill=self.evaluate(DISTILL, ONE_STEP),
            naive_distill=self.evaluate(DISTILL + "_naive", ONE_STEP),
            no_distill=self.evaluate(ANNEAL, ONE_STEP),
            no_anneal=no_anneal,
        )
        store.write_json_model(self.output_dir / "ablation.json", report)
        return report
