"""
End-to-end experiment pipeline and NSE reporting

Stages: generate -> split -> train-cgan -> train-lstm -> esprit -> evaluate
-> report. Each stage failure is re-raised as StageError tagged with the
stage name. NSE is measured on the mixed, profiled time-domain chain of
every method against the chain of the true channel.
"""
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from operator import attrgetter
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import joblib
import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

import cgan
import lstm
from channel_sim import (ChannelMatrix, DatasetSpec, MultipathParams, expand_zero_rows, measurement_rng,
                         sample_dataset, simulate_measurement)
from config_manager import ExperimentConfig, config_to_dict, validate_config
from database import ResultsStore
from dataset_io import DatasetHeader, read_dataset, write_dataset, write_tensors
from errors import ConfigError, StageError
from esprit import EspritEstimate, export_estimates, reconstruct_channel, run_batch
from preprocess import (LstmSequences, MixingSequence, as_array, build_gan_pair, build_lstm_inputs,
                        combine_mag_phase, concat_sequences, gen_sequence, nse, time_domain_chain)

logger = logging.getLogger(__name__)

CGAN = "cGAN"
CGAN_LSTM = "cGAN+LSTM"
MEASUREMENT = "Measurement"
MEASUREMENT_FD = "Measurement-FD"
ID_COLUMNS = ["sample_id", "dataset", "num_paths"]
SEQUENCES_FILE = "lstm_test_sequences.mrce"

ChannelGenerator = Callable[[Sequence["PipelineSample"]], List[ChannelMatrix]]
PhaseRefiner = Callable[[np.ndarray], np.ndarray]
Dataset = List[Tuple[MultipathParams, ChannelMatrix]]


def esprit_method(num_paths: int) -> str:
    return f"ESPRIT-{num_paths}MPC"


def method_slug(method: str) -> str:
    return method.lower().replace("+", "_").replace("-", "_")


@dataclass
class PipelineSample:
    """One channel with the single noise realization every method sees"""
    sample_id: int
    dataset: int
    params: MultipathParams
    H: ChannelMatrix
    Z: np.ndarray
    H_c: ChannelMatrix
    H_ce: ChannelMatrix

    @property
    def num_paths(self) -> int:
        return self.params.num_paths


@dataclass
class Splits:
    test: List[PipelineSample]
    gan_train: List[PipelineSample]
    lstm_train: List[PipelineSample]
    validation: List[PipelineSample] = field(default_factory=list)


def cdf_points(values: Sequence[float]) -> List[Tuple[float, float]]:
    """Empirical CDF as sorted (value, fraction) pairs; the last fraction is 1"""
    values = np.sort(np.asarray(values, dtype=float).ravel())
    if np.any(np.isnan(values)):
        raise ValueError("cdf_points got NaN values")
    n = len(values)
    return [(float(v), (i + 1) / n) for i, v in enumerate(values)]


def _db(value: float) -> Optional[float]:
    return float(10 * np.log10(value)) if value > 0 else None


def summarize(values: Sequence[float]) -> Dict[str, Optional[float]]:
    values = np.asarray(values, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) == 0:
        return {"count": 0, "median": None, "mean": None, "std": None, "mean_db": None, "median_db": None}
    median, mean = float(np.median(values)), float(np.mean(values))
    return {"count": int(len(values)), "median": median, "mean": mean, "std": float(np.std(values)),
            "mean_db": _db(mean), "median_db": _db(median)}


@dataclass
class NseReport:
    """Wide per-sample table: id columns plus one NSE column per method (NaN where not applicable)"""
    per_sample: pd.DataFrame
    methods: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.methods:
            self.methods = [c for c in self.per_sample.columns if c not in ID_COLUMNS]

    def values(self, method: str) -> np.ndarray:
        column = self.per_sample[method].to_numpy(dtype=float)
        return column[~np.isnan(column)]

    def cdfs(self) -> Dict[str, List[Tuple[float, float]]]:
        return {method: cdf_points(self.values(method)) for method in self.methods}

    def summary(self) -> Dict[str, Dict[str, Optional[float]]]:
        return {method: summarize(self.values(method)) for method in self.methods}


def sample_nse(reference: np.ndarray, estimate: np.ndarray, domain: str = "per_antenna") -> float:
    """Per-antenna NSE averaged over rows, or one NSE over the whole matrix"""
    if domain == "per_antenna":
        return float(np.mean(nse(reference, estimate, axis=-1)))
    if domain == "matrix":
        return float(nse(reference, estimate))
    raise ValueError(f"unknown NSE domain {domain!r}")


@contextmanager
def stage(name: str):
    logger.info("Stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


# -- generate ---------------------------------------------------------------

def dataset_path(output_dir: Path, index: int) -> Path:
    return Path(output_dir) / "data" / f"dataset{index + 1}.mrce"


def _header_matches(header: DatasetHeader, spec: DatasetSpec) -> bool:
    expected = DatasetHeader.from_spec(spec)
    return vars(header) == vars(expected)


def generate_datasets(config: ExperimentConfig, force: bool = False) -> List[Dataset]:
    """Load each dataset from the output directory, generating (and writing) it when absent or stale"""
    out = config.output_path()
    datasets = []
    for k, spec in enumerate(config.datasets):
        path = dataset_path(out, k)
        if path.exists() and not force:
            header, samples = read_dataset(path)
            if _header_matches(header, spec):
                datasets.append(samples)
                continue
            logger.warning("%s does not match the configured dataset; regenerating", path)
        samples = sample_dataset(spec, config.n_jobs)
        write_dataset(path, samples, DatasetHeader.from_spec(spec))
        datasets.append(samples)
    return datasets


def build_samples(config: ExperimentConfig,
                  datasets: Sequence[Dataset]) -> List[PipelineSample]:
    samples = []
    for k, (spec, data) in enumerate(zip(config.datasets, datasets)):
        for i, (params, H) in enumerate(data):
            Z, H_c = simulate_measurement(H, spec.snr_db, measurement_rng(spec.rng_seed, i), spec.convention)
            samples.append(PipelineSample(len(samples), k, params, H, Z, H_c,
                                          expand_zero_rows(H_c, spec.convention)))
    return samples


def split_samples(samples: Sequence[PipelineSample], config: ExperimentConfig) -> Splits:
    """
    Held-out test pool, cGAN subset of the rest, LSTM pool = all non-test
    samples. The validation slice is a stratified subset of the test pool.
    """
    split = config.split
    labels = [s.dataset for s in samples]
    rest, test = train_test_split(list(samples), test_size=split.test_size, stratify=labels,
                                  random_state=split.seed)
    if split.gan_train_size < len(rest):
        gan_train, _ = train_test_split(rest, train_size=split.gan_train_size,
                                        stratify=[s.dataset for s in rest], random_state=split.seed + 1)
    else:
        gan_train = list(rest)
    if not split.val_size:
        validation = []
    elif split.val_size >= len(test):
        validation = list(test)
    else:
        validation, _ = train_test_split(test, train_size=split.val_size,
                                         stratify=[s.dataset for s in test], random_state=split.seed + 2)
    by_id = attrgetter("sample_id")
    return Splits(sorted(test, key=by_id), sorted(gan_train, key=by_id), sorted(rest, key=by_id),
                  sorted(validation, key=by_id))


# -- checkpoints ------------------------------------------------------------

GENERATOR_CHECKPOINT = "generator.mrce"
PHASE_NET_CHECKPOINT = "phase_net.mrce"
# cGAN keys that leave the trained weights unchanged
_CGAN_RUNTIME_KEYS = ("scale_factor", "checkpoint_every", "inference_dropout")


def checkpoint_dir(config: ExperimentConfig) -> Path:
    return config.output_path() / "checkpoints"


def _training_data(data: Dict) -> Dict:
    return {"datasets": data["datasets"],
            "split": {k: v for k, v in data["split"].items() if k != "val_size"}}


def generator_fingerprint(config: ExperimentConfig) -> str:
    """Hash of every setting the generator weights depend on"""
    data = config_to_dict(config)
    return joblib.hash({**_training_data(data),
                        "cgan": {k: v for k, v in data["cgan"].items() if k not in _CGAN_RUNTIME_KEYS},
                        "scale_factor": data["preprocess"]["scale_factor"]})


def phase_net_fingerprint(config: ExperimentConfig, upstream: Optional[str]) -> str:
    """`upstream` is the generator's fingerprint, None for an injected generator"""
    data = config_to_dict(config)
    return joblib.hash({**_training_data(data), "lstm": data["lstm"], "preprocess": data["preprocess"],
                        "generator": upstream})


def fingerprint_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".json")


def _write_fingerprint(checkpoint: Path, fingerprint: str):
    fingerprint_path(checkpoint).write_text(json.dumps({"fingerprint": fingerprint}) + "\n", encoding="utf-8")


def _checkpoint_is_current(checkpoint: Path, fingerprint: str) -> bool:
    if not checkpoint.exists():
        return False
    try:
        stored = json.loads(fingerprint_path(checkpoint).read_text(encoding="utf-8")).get("fingerprint")
    except (OSError, ValueError):
        stored = None
    if stored != fingerprint:
        logger.warning("%s was trained with a different configuration; retraining", checkpoint)
        return False
    return True


# -- cGAN -------------------------------------------------------------------

def _gan_pairs(config: ExperimentConfig, samples: Sequence[PipelineSample]):
    pairs = [build_gan_pair(s.H_ce, s.H, config.preprocess.scale_factor) for s in samples]
    return [x for x, _ in pairs], [y for _, y in pairs]


def train_generator_stage(config: ExperimentConfig, splits: Splits) -> cgan.TrainedCgan:
    """Train on the cGAN split, monitor on the validation slice, write checkpoint and history"""
    inputs, labels = _gan_pairs(config, splits.gan_train)
    val_inputs, val_labels = _gan_pairs(config, splits.validation)
    config.cgan.scale_factor = config.preprocess.scale_factor
    trained = cgan.train_cgan(inputs, labels, config.cgan, val_inputs, val_labels,
                              checkpoint_dir=checkpoint_dir(config))
    path = checkpoint_dir(config) / GENERATOR_CHECKPOINT
    cgan.save_generator(path, trained.generator)
    _write_fingerprint(path, generator_fingerprint(config))
    cgan.history_to_csv(trained.history, config.output_path() / "cgan_history.csv")
    return trained


def load_or_train_generator(config: ExperimentConfig, splits: Splits,
                            retrain: bool = False) -> Tuple[cgan.GeneratorNet, Optional[pd.DataFrame]]:
    path = checkpoint_dir(config) / GENERATOR_CHECKPOINT
    if not retrain and _checkpoint_is_current(path, generator_fingerprint(config)):
        logger.info("Loading generator from %s", path)
        config.cgan.scale_factor = config.preprocess.scale_factor
        return cgan.load_generator(path, config.cgan), None
    trained = train_generator_stage(config, splits)
    return trained.generator, trained.history


def generator_stage(net: cgan.GeneratorNet, scale_factor: Optional[float] = None) -> ChannelGenerator:
    return lambda samples: cgan.infer_batch(net, [s.H_ce for s in samples], scale_factor)


# -- LSTM -------------------------------------------------------------------

def mixing_sequence(config: ExperimentConfig) -> MixingSequence:
    return gen_sequence(config.preprocess.window, config.preprocess.seq_seed)


def lstm_sequences(config: ExperimentConfig, samples: Sequence[PipelineSample],
                   generated: Sequence[ChannelMatrix], seq: MixingSequence) -> LstmSequences:
    pre = config.preprocess
    parts = [build_lstm_inputs(H_g, s.H, s.Z, seq, pre.oversample, pre.window, pre.window_offset,
                               pre.label_source)
             for s, H_g in zip(samples, generated)]
    if not parts:
        raise ValueError("no samples to build LSTM sequences from")
    return concat_sequences(parts)


def validation_sequences(config: ExperimentConfig, splits: Splits, generated_test: Sequence[ChannelMatrix],
                         seq: MixingSequence) -> Optional[LstmSequences]:
    """Sequences of the validation slice, reusing the generator outputs of the test pool"""
    if not splits.validation:
        return None
    by_id = {s.sample_id: H_g for s, H_g in zip(splits.test, generated_test)}
    return lstm_sequences(config, splits.validation, [by_id[s.sample_id] for s in splits.validation], seq)


def train_phase_stage(config: ExperimentConfig, sequences: LstmSequences,
                      val_sequences: Optional[LstmSequences] = None,
                      upstream: Optional[str] = None) -> lstm.TrainedPhaseNet:
    val_inputs = val_sequences.inputs if val_sequences is not None else None
    val_labels = val_sequences.labels if val_sequences is not None else None
    trained = lstm.train_phase_net(sequences.inputs, sequences.labels, config.lstm, val_inputs, val_labels)
    path = checkpoint_dir(config) / PHASE_NET_CHECKPOINT
    lstm.save_phase_net(path, trained.net)
    _write_fingerprint(path, phase_net_fingerprint(config, upstream))
    lstm.history_to_csv(trained.history, config.output_path() / "lstm_history.csv")
    return trained


def load_or_train_phase_net(config: ExperimentConfig, sequences: LstmSequences, retrain: bool = False,
                            val_sequences: Optional[LstmSequences] = None,
                            upstream: Optional[str] = None) -> Tuple[lstm.PhaseNet, Optional[pd.DataFrame]]:
    path = checkpoint_dir(config) / PHASE_NET_CHECKPOINT
    if not retrain and _checkpoint_is_current(path, phase_net_fingerprint(config, upstream)):
        logger.info("Loading phase net from %s", path)
        return lstm.load_phase_net(path, config.lstm), None
    trained = train_phase_stage(config, sequences, val_sequences, upstream)
    return trained.net, trained.history


def phase_refiner_stage(net: lstm.PhaseNet) -> PhaseRefiner:
    return lambda inputs: lstm.refine_sequences(net, inputs)


# -- ESPRIT -----------------------------------------------------------------

def esprit_stage(config: ExperimentConfig, samples: Sequence[PipelineSample],
                 export: bool = True) -> List[EspritEstimate]:
    """Estimate every sample with its dataset's MPC count as model order"""
    spec = config.datasets[0]
    estimates = run_batch([s.H_c for s in samples], [s.num_paths for s in samples], spec.geometry,
                          spec.num_subcarriers, config.esprit, spec.convention, config.n_jobs)
    if export:
        export_estimates(estimates, config.output_path() / "esprit_estimates.csv",
                         [s.sample_id for s in samples])
    return estimates


# -- evaluate ---------------------------------------------------------------

def evaluate_samples(config: ExperimentConfig, samples: Sequence[PipelineSample], sequences: LstmSequences,
                     refined_phase: np.ndarray, estimates: Sequence[EspritEstimate],
                     seq: MixingSequence) -> NseReport:
    """
    Time-domain NSE of every method against the true channel's chain.
    `sequences` holds M consecutive rows per sample, in `samples` order.
    """
    pre = config.preprocess
    domain = config.nse_domain
    spec = config.datasets[0]
    M = samples[0].H.shape[0] if samples else 0
    esprit_methods = sorted({s.num_paths for s in samples})
    if len(sequences) != M * len(samples) or len(estimates) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(sequences)} sequences and {len(estimates)} estimates")

    def chain(H):
        return time_domain_chain(H, seq, pre.oversample, pre.window, pre.window_offset)

    rows = []
    for k, (s, est) in enumerate(zip(samples, estimates)):
        rows_k = slice(k * M, (k + 1) * M)
        truth = chain(s.H)
        cgan_chain = sequences.generated[rows_k]
        combined = combine_mag_phase(np.abs(cgan_chain), refined_phase[rows_k])
        esprit_chain = chain(reconstruct_channel(est, spec.geometry, spec.num_subcarriers))
        row = {"sample_id": s.sample_id, "dataset": s.dataset, "num_paths": s.num_paths,
               CGAN: sample_nse(truth, cgan_chain, domain),
               CGAN_LSTM: sample_nse(truth, combined, domain),
               MEASUREMENT: sample_nse(truth, sequences.measured[rows_k], domain),
               MEASUREMENT_FD: sample_nse(as_array(s.H), as_array(s.H) + s.Z, domain)}
        for L in esprit_methods:
            row[esprit_method(L)] = sample_nse(truth, esprit_chain, domain) if L == s.num_paths else np.nan
        rows.append(row)

    methods = [CGAN, CGAN_LSTM] + [esprit_method(L) for L in esprit_methods] + [MEASUREMENT, MEASUREMENT_FD]
    return NseReport(pd.DataFrame(rows, columns=ID_COLUMNS + methods), methods)


# -- report -----------------------------------------------------------------

def export_report(report: NseReport, directory: Union[str, Path]) -> List[Path]:
    """Write nse_per_sample.csv, one cdf_<method>.csv per method and summary.json"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / "nse_per_sample.csv"]
        report.per_sample.to_csv(written[0], index=False, float_format="%.17g")
        for method, points in report.cdfs().items():
            path = directory / f"cdf_{method_slug(method)}.csv"
            pd.DataFrame(points, columns=["nse", "fraction"]).to_csv(path, index=False, float_format="%.17g")
            written.append(path)
        path = directory / "summary.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.summary(), f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(path)
    except OSError as e:
        raise OSError(f"cannot write report to {directory}: {e}") from e
    logger.info("Report written to %s (%d files)", directory, len(written))
    return written


def export_sequences(sequences: LstmSequences, refined_phase: np.ndarray, sample_ids: Sequence[int],
                     path: Union[str, Path]):
    """Tensor bundle of the test-split LSTM inputs, labels and refined phases, one row per antenna"""
    rows_per_sample = len(sequences) // max(1, len(sample_ids))
    write_tensors(path, {
        "sample_id": np.repeat(np.asarray(sample_ids, dtype=np.int64), rows_per_sample),
        "inputs": np.asarray(sequences.inputs, dtype=np.float64),
        "labels": np.asarray(sequences.labels, dtype=np.float64),
        "refined_phase": np.asarray(refined_phase, dtype=np.float64),
    })


def load_report(directory: Union[str, Path]) -> NseReport:
    path = Path(directory) / "nse_per_sample.csv"
    if not path.exists():
        raise OSError(f"no report found at {path}")
    per_sample = pd.read_csv(path)
    missing = [c for c in ID_COLUMNS if c not in per_sample.columns]
    if missing:
        raise ValueError(f"{path} is missing columns {', '.join(missing)}")
    return NseReport(per_sample)


def format_summary(report: NseReport) -> str:
    lines = [f"{'method':<16}{'count':>6}{'median':>12}{'mean':>12}{'mean dB':>10}"]
    for method, stats in report.summary().items():
        if not stats["count"]:
            continue
        mean_db = f"{stats['mean_db']:.2f}" if stats["mean_db"] is not None else "-inf"
        lines.append(f"{method:<16}{stats['count']:>6}{stats['median']:>12.4e}{stats['mean']:>12.4e}{mean_db:>10}")
    return "\n".join(lines)


def _record_run(config: ExperimentConfig, report: NseReport, histories: Dict[str, pd.DataFrame]) -> int:
    store = ResultsStore(config.results_db)
    return store.record_run(config.name, config_to_dict(config), report.per_sample, report.summary(),
                            histories, str(config.output_path()))


def run_pipeline(config: ExperimentConfig, generator: Optional[Union[cgan.GeneratorNet, ChannelGenerator]] = None,
                 phase_refiner: Optional[Union[lstm.PhaseNet, PhaseRefiner]] = None,
                 retrain: bool = False, export: bool = True) -> NseReport:
    """
    Run every stage. `generator` / `phase_refiner` replace the trained
    networks when given (a network object or a plain callable); otherwise
    checkpoints in the output directory are reused when their config
    fingerprint matches, unless `retrain` is set.
    """
    issues = validate_config(config)
    if issues:
        raise ConfigError(f"invalid configuration '{config.name}': {'; '.join(issues)}")
    histories: Dict[str, pd.DataFrame] = {}

    with stage("generate"):
        samples = build_samples(config, generate_datasets(config))
        splits = split_samples(samples, config)
        seq = mixing_sequence(config)
        logger.info("Split %d samples: %d test (%d validation), %d cGAN train, %d LSTM train", len(samples),
                    len(splits.test), len(splits.validation), len(splits.gan_train), len(splits.lstm_train))

    upstream = None
    with stage("train-cgan"):
        if generator is None:
            net, history = load_or_train_generator(config, splits, retrain)
            if history is not None:
                histories["cgan"] = history
            generator = net
            upstream = generator_fingerprint(config)
        if isinstance(generator, cgan.GeneratorNet):
            generator = generator_stage(generator, config.preprocess.scale_factor)
        generated_train = generator(splits.lstm_train)
        generated_test = generator(splits.test)

    with stage("train-lstm"):
        test_sequences = lstm_sequences(config, splits.test, generated_test, seq)
        if phase_refiner is None:
            train_sequences = lstm_sequences(config, splits.lstm_train, generated_train, seq)
            val_sequences = validation_sequences(config, splits, generated_test, seq)
            net, history = load_or_train_phase_net(config, train_sequences, retrain, val_sequences, upstream)
            if history is not None:
                histories["lstm"] = history
            phase_refiner = net
        if isinstance(phase_refiner, lstm.PhaseNet):
            phase_refiner = phase_refiner_stage(phase_refiner)
        refined = np.asarray(phase_refiner(test_sequences.inputs), dtype=float)

    with stage("esprit"):
        estimates = esprit_stage(config, splits.test, export)

    with stage("evaluate"):
        report = evaluate_samples(config, splits.test, test_sequences, refined, estimates, seq)

    with stage("report"):
        if export:
            export_report(report, config.output_path())
            export_sequences(test_sequences, refined, [s.sample_id for s in splits.test],
                             config.output_path() / SEQUENCES_FILE)
        if config.results_db:
            _record_run(config, report, histories)
    for method, stats in report.summary().items():
        if stats["count"]:
            logger.info("%s: median NSE %.4e, mean NSE %.4e", method, stats["median"], stats["mean"])
    return report
