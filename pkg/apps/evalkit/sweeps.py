"""
Data-fraction sweep and ablation runners.

A cell is one (fraction, model kind, seed) fine-tune + evaluation. Cells are
independent; a cell whose training diverges is recorded with infinite WER.
"""
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import pandas as pd

from apps.synthdata.corpus import build_corpus
from apps.training.builders import SINGLE_DECODER, ZIPPER, build_model, make_objective
from apps.training.trainer import Trainer, TrainingDivergedError

from .evaluation import evaluate_model, evaluate_task
from .metrics import bucket_wer_by_ref_length

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.001, 0.01, 0.03, 0.1, 0.3, 1.0)
DEFAULT_KINDS = (ZIPPER, SINGLE_DECODER)

SWEEP_COLUMNS = ["fraction", "kind", "freeze_a", "freeze_b", "seed", "clean_wer", "other_wer", "tts_wer", "diverged"]
ABLATION_COLUMNS = ["ablation", "variant", "seed", "asr_wer", "tts_wer", "diverged"]
BUCKET_COLUMNS = ["max_ref_words", "sentences", "substitutions", "deletions", "insertions", "ref_words", "wer"]

INPUT_PROJ_TEXT = "input_proj_text"
INPUT_PROJ_SPEECH = "input_proj_speech"
INPUT_PROJ_BOTH = "input_proj_both"
N_CROSS_LAYERS = "n_cross_layers"
ABLATIONS = (INPUT_PROJ_TEXT, INPUT_PROJ_SPEECH, INPUT_PROJ_BOTH, N_CROSS_LAYERS)


@dataclass(frozen=True)
class SweepRow:
    fraction: float
    kind: str
    freeze_a: bool
    freeze_b: bool
    seed: int
    clean_wer: float
    other_wer: float
    tts_wer: float
    diverged: bool = False


@dataclass
class SweepResult:
    rows: list

    def frame(self):
        frame = pd.DataFrame([asdict(r) for r in self.rows], columns=SWEEP_COLUMNS)
        return frame.sort_values(["fraction", "kind", "seed"], kind="stable").reset_index(drop=True)

    def to_csv(self, path):
        return write_csv(self.frame(), path)

    def median_wer(self, kind, fraction, column="clean_wer"):
        frame = self.frame()
        cells = frame[(frame.kind == kind) & (frame.fraction == fraction)]
        return float(cells[column].median())


def write_csv(frame, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def freeze_flags(model):
    config = getattr(model, "config", None)
    return (bool(getattr(config, "freeze_a", False)), bool(getattr(config, "freeze_b", False)))


def train_cell(experiment, corpus, kind, seed, towers=None, zipper_config=None):
    """Fine-tune a fresh model of ``kind``; returns ``(model, diverged)``."""
    model = build_model(kind, experiment.backbone_a, experiment.backbone_b, zipper_config or experiment.zipper,
                        seed, towers, baseline_dropout=experiment.baseline_dropout)
    spec = replace(experiment.train, seed=seed)
    trainer = Trainer(make_objective(model), spec, corpus.paired)
    try:
        trainer.fit()
    except TrainingDivergedError as e:
        logger.warning(f"{kind} seed={seed} diverged at step {e.step}")
        return model, True
    return model, False


def run_cell(experiment, fraction, kind, seed, towers=None):
    try:
        corpus = build_corpus(replace(experiment.corpus, fraction=fraction), unpaired=False)
    except ValueError as e:
        logger.warning(f"skipping fraction {fraction}: {e}")
        return SweepRow(fraction, kind, False, False, seed, math.inf, math.inf, math.inf, True)
    model, diverged = train_cell(experiment, corpus, kind, seed, towers)
    freeze_a, freeze_b = freeze_flags(model)
    if diverged:
        return SweepRow(fraction, kind, freeze_a, freeze_b, seed, math.inf, math.inf, math.inf, True)
    summary = evaluate_model(model, corpus, experiment.eval).summary()
    return SweepRow(fraction, kind, freeze_a, freeze_b, seed,
                    summary["asr_clean_wer"], summary["asr_other_wer"], summary["tts_clean_wer"])


def sweep_cells(fractions, kinds, seeds):
    return [(f, k, s) for f in fractions for k in kinds for s in seeds]


def run_data_fraction_sweep(experiment, fractions=DEFAULT_FRACTIONS, kinds=DEFAULT_KINDS, seeds=(0,),
                            towers=None, runner=None):
    """
    One row per (fraction, kind, seed). ``runner(experiment, fraction, kind,
    seed, towers)`` defaults to running the cell in-process.
    """
    runner = runner or run_cell
    cells = sweep_cells(fractions, kinds, seeds)
    logger.info(f"Sweeping {len(cells)} cells")
    return SweepResult([runner(experiment, f, k, s, towers) for f, k, s in cells])


### ABLATIONS

@dataclass(frozen=True)
class AblationRow:
    ablation: str
    variant: str
    seed: int
    asr_wer: float
    tts_wer: float
    diverged: bool = False


def ablation_variants(ablation, base, n_zips_grid):
    """``(label, ZipperConfig)`` pairs; the text tower stays frozen and the speech tower trains."""
    base = replace(base, freeze_a=True, freeze_b=False)
    if ablation == INPUT_PROJ_TEXT:
        return [("with", base), ("without", replace(base, enable_input_proj_a=False))]
    if ablation == INPUT_PROJ_SPEECH:
        return [("with", base), ("without", replace(base, enable_input_proj_b=False))]
    if ablation == INPUT_PROJ_BOTH:
        return [("with", base), ("without", replace(base, enable_input_proj_a=False, enable_input_proj_b=False))]
    if ablation == N_CROSS_LAYERS:
        return [(f"n_zips={n}", replace(base, n_zips=n)) for n in n_zips_grid]
    raise ValueError(f"unknown ablation {ablation!r}; expected one of {ABLATIONS}")


def run_ablation_cell(experiment, ablation, label, zipper_config, seed, towers=None):
    corpus = build_corpus(experiment.corpus, unpaired=False)
    model, diverged = train_cell(experiment, corpus, ZIPPER, seed, towers, zipper_config)
    if diverged:
        return AblationRow(ablation, label, seed, math.inf, math.inf, True)
    asr = evaluate_task(model, corpus.heldout_clean, "asr", experiment.eval, "heldout_clean", corpus.codebook)
    tts = evaluate_task(model, corpus.heldout_clean, "tts", experiment.eval, "heldout_clean", corpus.codebook)
    return AblationRow(ablation, label, seed, asr.wer, tts.wer)


def run_ablation(experiment, ablation, seeds=(0,), n_zips_grid=None, towers=None):
    n_zips_grid = n_zips_grid if n_zips_grid is not None else experiment.ablation_n_zips
    variants = ablation_variants(ablation, experiment.zipper, n_zips_grid)
    rows = [
        run_ablation_cell(experiment, ablation, label, config, seed, towers)
        for label, config in variants
        for seed in seeds
    ]
    return pd.DataFrame([asdict(r) for r in rows], columns=ABLATION_COLUMNS)


### LENGTH BUCKETS

def bucket_frame(report, bucket_edges):
    rows = bucket_wer_by_ref_length(report.pairs(), bucket_edges)
    return pd.DataFrame(
        [
            {
                "max_ref_words": r.max_ref_words,
                "sentences": r.sentences,
                "substitutions": r.breakdown.substitutions,
                "deletions": r.breakdown.deletions,
                "insertions": r.breakdown.insertions,
                "ref_words": r.breakdown.ref_words,
                "wer": r.wer,
            }
            for r in rows
        ],
        columns=BUCKET_COLUMNS,
    )
