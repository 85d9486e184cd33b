import logging
from dataclasses import asdict, dataclass, field

from apps.fusion.zipper import ZipperModel
from apps.inference.generation import DecodePlan, generate, generate_baseline
from apps.interleave.sequences import Modality
from apps.synthdata.tokenizers import get_codebook
from apps.training.examples import Task, prompt_for

from .metrics import EvaluationError, pooled, wer, wilcoxon_signed_rank

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalSettings:
    max_examples: int = 200
    max_text_tokens: int = 48
    max_speech_tokens: int = 96
    bucket_edges: tuple = (2, 3, 4, 5, 6)
    alpha: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "bucket_edges", tuple(self.bucket_edges))

    def to_dict(self):
        data = asdict(self)
        data["bucket_edges"] = list(self.bucket_edges)
        return data


@dataclass
class SentenceScore:
    id: str
    reference: str
    hypothesis: str
    breakdown: object
    truncated: bool = False


@dataclass
class TaskReport:
    task: str
    split: str
    sentences: list = field(default_factory=list)

    @property
    def breakdown(self):
        return pooled(s.breakdown for s in self.sentences)

    @property
    def wer(self):
        return self.breakdown.wer

    def per_sentence_wer(self):
        return [s.breakdown.wer for s in self.sentences]

    def pairs(self):
        return [(s.reference, s.hypothesis) for s in self.sentences]


def run_generation(model, prompt, plan):
    if isinstance(model, ZipperModel):
        return generate(model, prompt, plan)
    return generate_baseline(model, prompt, plan)


def evaluate_task(model, pairs, task, settings, split="", codebook=None):
    """
    ASR: speech prompt, text plan, hypothesis is the decoded text.
    TTS: text prompt, speech plan, hypothesis is the inverse of the generated
    speech under ``codebook``, which must be the one the pairs were encoded with.
    """
    task = Task(task)
    pairs = list(pairs)[: settings.max_examples]
    if not pairs:
        raise EvaluationError(f"no {split or 'evaluation'} pairs to score")
    if task is Task.ASR:
        plan = DecodePlan((Modality.A,), max_tokens=settings.max_text_tokens)
    else:
        plan = DecodePlan((Modality.B,), max_tokens=settings.max_speech_tokens)
    report = TaskReport(task.value, split)
    for pair in pairs:
        result = run_generation(model, prompt_for(pair, task), plan)
        hypothesis = result.decoded(codebook=codebook)
        report.sentences.append(
            SentenceScore(pair.id, pair.text, hypothesis, wer(pair.text, hypothesis), result.any_truncated))
    logger.info(f"{task.value} on {split or 'pairs'}: WER {report.wer:.4f} over {len(pairs)} sentences")
    return report


def evaluate_oracle(pairs, settings=None, split="", codebook=None):
    """TTS pipeline on gold speech tokens: only the codebook inverse is scored."""
    settings = settings or EvalSettings()
    codebook = codebook if codebook is not None else get_codebook()
    report = TaskReport(Task.TTS.value, split)
    for pair in list(pairs)[: settings.max_examples]:
        hypothesis = codebook.decode(pair.speech_tokens)
        report.sentences.append(SentenceScore(pair.id, pair.text, hypothesis, wer(pair.text, hypothesis)))
    if not report.sentences:
        raise EvaluationError("no pairs for the oracle pipeline")
    return report


@dataclass
class ModelEvaluation:
    asr_clean: TaskReport
    asr_other: TaskReport
    tts_clean: TaskReport

    def summary(self):
        return {
            "asr_clean_wer": self.asr_clean.wer,
            "asr_other_wer": self.asr_other.wer,
            "tts_clean_wer": self.tts_clean.wer,
        }

    def reports(self):
        return [self.asr_clean, self.asr_other, self.tts_clean]


def evaluate_model(model, corpus, settings):
    """ASR on both held-out splits and TTS on the clean split only."""
    return ModelEvaluation(
        asr_clean=evaluate_task(model, corpus.heldout_clean, Task.ASR, settings, "heldout_clean", corpus.codebook),
        asr_other=evaluate_task(model, corpus.heldout_other, Task.ASR, settings, "heldout_other", corpus.codebook),
        tts_clean=evaluate_task(model, corpus.heldout_clean, Task.TTS, settings, "heldout_clean", corpus.codebook),
    )


def compare_models(report_a, report_b, alpha=0.05):
    """Sentence-level signed-rank test between two reports over the same sentences."""
    ids_a = [s.id for s in report_a.sentences]
    ids_b = [s.id for s in report_b.sentences]
    if ids_a != ids_b:
        raise EvaluationError("reports were computed over different sentences")
    return wilcoxon_signed_rank(report_a.per_sentence_wer(), report_b.per_sentence_wer(), alpha)
