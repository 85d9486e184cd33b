"""
The experiment pipeline behind the management commands: pre-training,
fine-tuning, evaluation, sweeps, ablations and generation. Each step reads an
``ExperimentConfig`` and writes its artifacts under ``config.output_dir``.
"""
import logging
import uuid
from dataclasses import replace
from pathlib import Path

import pandas as pd

from apps.backbone.pretraining import pretrain
from apps.evalkit.evaluation import compare_models, evaluate_model, evaluate_oracle, evaluate_task
from apps.evalkit.metrics import EvaluationError
from apps.evalkit.plots import plot_buckets, plot_losses, plot_sweep
from apps.evalkit.sweeps import bucket_frame, run_ablation, write_csv
from apps.evalkit.tasks import dispatch_sweep
from apps.fusion.zipper import ZipperConfig, ZipperModel
from apps.inference.generation import generate, generate_baseline
from apps.interleave.sequences import InterleavedSequence, Modality, Segment
from apps.synthdata.corpus import build_corpus
from apps.synthdata.tokenizers import TextTokenizer
from apps.training.builders import SINGLE_DECODER, ZIPPER, build_model, load_tower, make_objective
from apps.training.examples import Task
from apps.training.trainer import MetricsLog, Trainer, lr_search

from .checkpoint import Checkpoint, CheckpointError, apply_state, load_checkpoint, load_tower_states, save_checkpoint
from .config import load_config_dict

logger = logging.getLogger(__name__)

TOWER_FILES = {Modality.A: "tower_a.ckpt", Modality.B: "tower_b.ckpt"}
MODEL_FILE = "model.ckpt"
METRICS_FILE = "metrics_{phase}.jsonl"

SUMMARY_COLUMNS = ["model", "task", "split", "sentences", "substitutions", "deletions", "insertions", "ref_words",
                   "wer", "truncated"]
SENTENCE_COLUMNS = ["model", "task", "split", "id", "reference", "hypothesis", "wer", "truncated"]
COMPARE_COLUMNS = ["task", "split", "wer_a", "wer_b", "statistic", "p_value", "significant", "n", "exact"]
LR_SEARCH_COLUMNS = ["learning_rate", "score"]

TOWER_NAMES = {Modality.A: "tower_a", Modality.B: "tower_b"}


def output_path(experiment, name):
    path = Path(experiment.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path / name


def fresh_metrics_log(experiment, phase):
    path = output_path(experiment, METRICS_FILE.format(phase=phase))
    path.unlink(missing_ok=True)
    return MetricsLog(path, phase)


### CHECKPOINTS

def save_model(path, model, kind, experiment, trainer=None):
    """Model weights, and when ``trainer`` is given everything needed to resume it."""
    metadata = {
        "format": "model",
        "kind": kind,
        "seed": experiment.seed,
        "zipper": model.config.to_dict() if isinstance(model, ZipperModel) else None,
        "experiment": experiment.to_dict(),
        "step": trainer.step if trainer is not None else 0,
        "trainer": None,
    }
    tensors = {f"model/{name}": value for name, value in model.state_dict().items()}
    if trainer is not None:
        state = trainer.state_dict()
        optimizer = state["optimizer"]
        metadata["trainer"] = {
            "sampler": state["sampler"],
            "dropout": state["dropout"],
            "optimizer": {k: optimizer[k] for k in ("kind", "learning_rate", "step")},
        }
        for param, slots in optimizer["slots"].items():
            for slot, value in slots.items():
                tensors[f"optimizer/{param}/{slot}"] = value
    return save_checkpoint(path, Checkpoint(metadata, tensors))


def trainer_state(checkpoint):
    meta = checkpoint.metadata
    if not meta.get("trainer"):
        raise CheckpointError("checkpoint holds no trainer state to resume from")
    slots = {}
    for name, value in checkpoint.group("optimizer").items():
        param, slot = name.rsplit("/", 1)
        slots.setdefault(param, {})[slot] = value
    return {
        "step": meta["step"],
        "optimizer": {**meta["trainer"]["optimizer"], "slots": slots},
        "sampler": meta["trainer"]["sampler"],
        "dropout": meta["trainer"]["dropout"],
    }


def load_model(path):
    """``(model, kind, experiment, checkpoint)`` from a model checkpoint."""
    checkpoint = load_checkpoint(path)
    meta = checkpoint.metadata
    if meta.get("format") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    experiment = load_config_dict(meta["experiment"])
    kind = meta["kind"]
    zipper_config = ZipperConfig(**meta["zipper"]) if meta.get("zipper") else experiment.zipper
    model = build_model(kind, experiment.backbone_a, experiment.backbone_b, zipper_config, experiment.seed,
                        baseline_dropout=experiment.baseline_dropout)
    apply_state(model, checkpoint.group("model"))
    model.eval()
    logger.info(f"Loaded {kind} model from {path} at step {meta.get('step', 0)}")
    return model, kind, experiment, checkpoint


def check_towers(experiment, towers):
    """Fail with the first mismatching parameter before any training starts."""
    configs = {Modality.A: experiment.backbone_a, Modality.B: experiment.backbone_b}
    for modality, state in towers.items():
        try:
            apply_state(load_tower(configs[modality], experiment.seed, TOWER_NAMES[modality]), state)
        except CheckpointError as e:
            raise CheckpointError(f"tower {modality.value}: {e}") from e


### PRETRAIN

def run_pretrain(experiment):
    """
    Pre-train the speech tower on the unpaired speech split, and the text tower
    on the unpaired text split when ``pretrain.text`` is set. Returns the
    written checkpoint paths keyed by modality.
    """
    corpus = build_corpus(experiment.corpus)
    streams = {Modality.B: [list(p.speech_tokens) for p in corpus.unpaired_speech]}
    if experiment.pretrain_text:
        tokenizer = TextTokenizer()
        streams[Modality.A] = [tokenizer.encode(p.text) for p in corpus.unpaired_text]
    configs = {Modality.A: experiment.backbone_a, Modality.B: experiment.backbone_b}

    paths = {}
    for modality in (Modality.B, Modality.A):
        if modality not in streams:
            continue
        tower = load_tower(configs[modality], experiment.seed, TOWER_NAMES[modality])
        metrics = fresh_metrics_log(experiment, f"pretrain_{modality.value.lower()}")
        report = pretrain(tower, streams[modality], experiment.pretrain, on_step=metrics)
        metadata = {
            "format": "tower",
            "modality": modality.value,
            "config": configs[modality].to_dict(),
            "seed": experiment.seed,
            "steps": report.steps,
            "initial_heldout_loss": report.initial_heldout_loss,
            "final_heldout_loss": report.final_heldout_loss,
        }
        tensors = {f"model/{name}": value for name, value in tower.state_dict().items()}
        paths[modality] = save_checkpoint(output_path(experiment, TOWER_FILES[modality]), Checkpoint(metadata, tensors))
    return paths


### TRAIN

def search_learning_rate(experiment, corpus, kind, zipper_config, towers):
    """Pick the learning rate with the best ASR WER geometric mean on the held-out splits."""

    def evaluate(learning_rate):
        spec = replace(experiment.train, learning_rate=learning_rate, checkpoint_every=0)
        model = build_model(kind, experiment.backbone_a, experiment.backbone_b, zipper_config, experiment.seed,
                            towers, baseline_dropout=experiment.baseline_dropout)
        Trainer(make_objective(model), spec, corpus.paired).fit()
        clean = evaluate_task(model, corpus.heldout_clean, Task.ASR, experiment.eval, "heldout_clean", corpus.codebook)
        other = evaluate_task(model, corpus.heldout_other, Task.ASR, experiment.eval, "heldout_other", corpus.codebook)
        return clean.wer, other.wer

    result = lr_search(experiment.learning_rates, evaluate)
    frame = pd.DataFrame(sorted(result.scores.items()), columns=LR_SEARCH_COLUMNS)
    write_csv(frame, output_path(experiment, "lr_search.csv"))
    logger.info(f"Selected learning rate {result.best_learning_rate}")
    return result.best_learning_rate


def run_train(experiment, kind=ZIPPER, tower_paths=None, freeze_a=None, freeze_b=None, resume=False,
              search_lr=False, plot=False):
    """
    Fine-tune a Zipper model or the single-decoder baseline on the paired
    split and write ``model.ckpt``. ``resume`` continues from the trainer
    state in an existing ``model.ckpt``; the data then comes from the
    experiment stored with it, and only ``train.steps`` is taken from
    ``experiment``.
    """
    path = output_path(experiment, MODEL_FILE)
    if resume:
        model, kind, stored, checkpoint = load_model(path)
        experiment = replace(stored, output_dir=experiment.output_dir,
                             train=replace(stored.train, steps=experiment.train.steps))
        corpus = build_corpus(experiment.corpus, unpaired=False)
        trainer = Trainer(make_objective(model), experiment.train, corpus.paired,
                          MetricsLog(output_path(experiment, METRICS_FILE.format(phase="finetune"))))
        trainer.load_state_dict(trainer_state(checkpoint))
        logger.info(f"Resuming {kind} from step {trainer.step}")
    else:
        overrides = {k: v for k, v in (("freeze_a", freeze_a), ("freeze_b", freeze_b)) if v is not None}
        corpus = build_corpus(experiment.corpus, unpaired=False)
        zipper_config = replace(experiment.zipper, **overrides)
        towers = load_tower_states(tower_paths)
        check_towers(experiment, towers)
        if search_lr:
            learning_rate = search_learning_rate(experiment, corpus, kind, zipper_config, towers)
            experiment = replace(experiment, train=replace(experiment.train, learning_rate=learning_rate))
        model = build_model(kind, experiment.backbone_a, experiment.backbone_b, zipper_config, experiment.seed,
                            towers, baseline_dropout=experiment.baseline_dropout)
        trainer = Trainer(make_objective(model), experiment.train, corpus.paired,
                          fresh_metrics_log(experiment, "finetune"))

    def on_checkpoint(current):
        save_model(path, current.model, kind, experiment, current)

    trainer.fit(on_checkpoint=on_checkpoint)
    save_model(path, trainer.model, kind, experiment, trainer)
    if plot and trainer.losses:
        plot_losses(trainer.losses, output_path(experiment, "loss.png"))
    return path, trainer


### EVAL

def _report_rows(label, reports):
    summary, sentences = [], []
    for report in reports:
        b = report.breakdown
        summary.append({
            "model": label, "task": report.task, "split": report.split, "sentences": len(report.sentences),
            "substitutions": b.substitutions, "deletions": b.deletions, "insertions": b.insertions,
            "ref_words": b.ref_words, "wer": b.wer,
            "truncated": sum(s.truncated for s in report.sentences),
        })
        sentences.extend(
            {
                "model": label, "task": report.task, "split": report.split, "id": s.id,
                "reference": s.reference, "hypothesis": s.hypothesis, "wer": s.breakdown.wer,
                "truncated": s.truncated,
            }
            for s in report.sentences
        )
    return summary, sentences


def compare_frame(evaluation_a, evaluation_b, alpha):
    rows = []
    for report_a, report_b in zip(evaluation_a.reports(), evaluation_b.reports()):
        row = {"task": report_a.task, "split": report_a.split, "wer_a": report_a.wer, "wer_b": report_b.wer}
        try:
            result = compare_models(report_a, report_b, alpha)
            row.update(statistic=result.statistic, p_value=result.p_value, significant=result.significant,
                       n=result.n, exact=result.exact)
        except EvaluationError as e:
            logger.warning(f"no significance test for {report_a.task} on {report_a.split}: {e}")
        rows.append(row)
    return pd.DataFrame(rows, columns=COMPARE_COLUMNS)


def run_eval(experiment, checkpoint=None, oracle=False, compare=None, plot=False):
    """
    Score a checkpoint (ASR on both held-out splits, TTS on the clean one),
    the gold-token oracle, or both. Returns the summary frame.
    """
    if checkpoint is None and not oracle:
        raise ValueError("nothing to evaluate: give a checkpoint or ask for the oracle")
    corpus = build_corpus(experiment.corpus, unpaired=False)
    summary, sentences = [], []
    evaluation = None
    if oracle:
        oracle_report = evaluate_oracle(corpus.heldout_clean, experiment.eval, "heldout_clean", corpus.codebook)
        rows = _report_rows("oracle", [oracle_report])
        summary.extend(rows[0])
        sentences.extend(rows[1])
    if checkpoint is not None:
        model, kind, _, _ = load_model(checkpoint)
        evaluation = evaluate_model(model, corpus, experiment.eval)
        rows = _report_rows(kind, evaluation.reports())
        summary.extend(rows[0])
        sentences.extend(rows[1])
        buckets = bucket_frame(evaluation.asr_clean, experiment.eval.bucket_edges)
        write_csv(buckets, output_path(experiment, "eval_buckets.csv"))
        if plot:
            plot_buckets(buckets, output_path(experiment, "eval_buckets.png"))
    if compare is not None:
        if evaluation is None:
            raise ValueError("--compare needs a checkpoint to compare against")
        other, other_kind, _, _ = load_model(compare)
        other_evaluation = evaluate_model(other, corpus, experiment.eval)
        rows = _report_rows(f"{other_kind}:compare", other_evaluation.reports())
        summary.extend(rows[0])
        sentences.extend(rows[1])
        write_csv(compare_frame(evaluation, other_evaluation, experiment.eval.alpha),
                  output_path(experiment, "eval_compare.csv"))
    frame = pd.DataFrame(summary, columns=SUMMARY_COLUMNS)
    write_csv(frame, output_path(experiment, "eval_summary.csv"))
    write_csv(pd.DataFrame(sentences, columns=SENTENCE_COLUMNS), output_path(experiment, "eval_sentences.csv"))
    return frame


### SWEEP / ABLATE

def run_sweep(experiment, tower_paths=None, run=None, plot=False):
    """Data-fraction sweep over the configured fractions, kinds and seeds."""
    run = run or uuid.uuid4().hex
    sweep = experiment.sweep
    result = dispatch_sweep(run, experiment, sweep.fractions, sweep.kinds, sweep.seeds, tower_paths)
    frame = result.frame()
    write_csv(frame, output_path(experiment, "sweep.csv"))
    if plot:
        plot_sweep(frame, output_path(experiment, "sweep.png"))
    return frame


def run_ablate(experiment, ablation, tower_paths=None):
    towers = load_tower_states(tower_paths)
    check_towers(experiment, towers)
    frame = run_ablation(experiment, ablation, experiment.sweep.seeds, experiment.ablation_n_zips, towers)
    write_csv(frame, output_path(experiment, f"ablation_{ablation}.csv"))
    return frame


### GENERATE

def build_prompt(text, modality, experiment):
    """A one-segment prompt: the text itself, or its clean speech encoding."""
    modality = Modality(modality)
    if modality is Modality.A:
        tokens = TextTokenizer().encode(text)
    else:
        tokens = experiment.corpus.codebook.encode(text)
    return InterleavedSequence((Segment(modality, tokens),))


def run_generate(checkpoint, prompt_text, prompt_modality, plan):
    """``(result, codebook)``: the generation and the speech codebook the checkpoint was trained with."""
    model, kind, experiment, _ = load_model(checkpoint)
    prompt = build_prompt(prompt_text, prompt_modality, experiment)
    run = generate_baseline if kind == SINGLE_DECODER else generate
    return run(model, prompt, plan), experiment.corpus.codebook


def describe_generation(result, codebook=None):
    """
    One line per generated segment: decoded text, or the speech-token stream
    followed by its inverse under ``codebook`` when one is given.
    """
    lines = []
    for index, (modality, tokens) in enumerate(result.generated):
        if modality is Modality.A:
            body = result.decoded(index)
        else:
            body = " ".join(str(t) for t in tokens)
            if codebook is not None:
                body += f" ({result.decoded(index, codebook)!r})"
        suffix = " [truncated]" if result.truncated[index] else ""
        lines.append(f"{modality.value}: {body}{suffix}")
    return lines

