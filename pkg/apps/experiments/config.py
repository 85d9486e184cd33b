"""
Experiment configuration: a JSON document validated by ``ExperimentSerializer``
and materialised into the dataclasses each app consumes. Every random choice
derives from the single top-level ``seed``.
"""
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from django.conf import settings
from rest_framework.parsers import JSONParser
from rest_framework.exceptions import ParseError

from apps.backbone.pretraining import PretrainSpec
from apps.backbone.towers import BackboneConfig, ConfigError
from apps.evalkit.evaluation import EvalSettings
from apps.evalkit.sweeps import DEFAULT_FRACTIONS, DEFAULT_KINDS
from apps.fusion.zipper import ZipperConfig
from apps.synthdata.corpus import CorpusSettings
from apps.synthdata.tokenizers import SPEECH_VOCAB_SIZE, TEXT_VOCAB_SIZE
from apps.training.builders import BASELINE_DROPOUT
from apps.training.trainer import LEARNING_RATE_GRID, TrainSpec

from .serializers import ExperimentSerializer, flatten_errors

logger = logging.getLogger(__name__)

TOWER_DEFAULTS = {
    "backbone_a": {"vocab_size": TEXT_VOCAB_SIZE, "max_seq_len": 64},
    "backbone_b": {"vocab_size": SPEECH_VOCAB_SIZE, "max_seq_len": 128},
}


@dataclass(frozen=True)
class SweepSettings:
    fractions: tuple = DEFAULT_FRACTIONS
    kinds: tuple = DEFAULT_KINDS
    seeds: tuple = (0,)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    backbone_a: BackboneConfig
    backbone_b: BackboneConfig
    zipper: ZipperConfig
    pretrain: PretrainSpec
    train: TrainSpec
    corpus: CorpusSettings
    eval: EvalSettings
    sweep: SweepSettings = field(default_factory=SweepSettings)
    pretrain_text: bool = False
    baseline_dropout: float = BASELINE_DROPOUT
    learning_rates: tuple = LEARNING_RATE_GRID
    ablation_n_zips: tuple = (0, 1, 2, 4)

    def with_seed(self, seed):
        return replace(
            self,
            seed=seed,
            pretrain=replace(self.pretrain, seed=seed),
            train=replace(self.train, seed=seed),
            corpus=replace(self.corpus, seed=seed),
        )

    def with_output_dir(self, output_dir):
        return replace(self, output_dir=str(output_dir))

    def to_dict(self):
        """JSON-able document that ``load_config_dict`` accepts."""
        def backbone(config):
            return {k: v for k, v in config.to_dict().items() if k not in ("vocab_size", "tie_output_to_embedding")}

        pretrain = {k: v for k, v in self.pretrain.to_dict().items() if k != "seed"}
        pretrain["text"] = self.pretrain_text
        train = {k: v for k, v in self.train.to_dict().items() if k != "seed"}
        train["baseline_dropout"] = self.baseline_dropout
        train["learning_rates"] = list(self.learning_rates)
        corpus = {k: v for k, v in self.corpus.to_dict().items() if k != "seed"}
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "backbone_a": backbone(self.backbone_a),
            "backbone_b": backbone(self.backbone_b),
            "zipper": self.zipper.to_dict(),
            "pretrain": pretrain,
            "train": train,
            "corpus": corpus,
            "eval": self.eval.to_dict(),
            "sweep": {
                "fractions": list(self.sweep.fractions),
                "kinds": list(self.sweep.kinds),
                "seeds": list(self.sweep.seeds),
                "ablation_n_zips": list(self.ablation_n_zips),
            },
        }


def _build(section, factory, values):
    try:
        return factory(**values)
    except (ConfigError, ValueError, TypeError) as e:
        raise ConfigError(f"{section}: {e}") from e


def materialize(data):
    seed = data.get("seed", settings.ZIPPER_DEFAULT_SEED)
    backbone_a = _build("backbone_a", BackboneConfig, {**TOWER_DEFAULTS["backbone_a"], **data.get("backbone_a", {})})
    backbone_b = _build("backbone_b", BackboneConfig, {**TOWER_DEFAULTS["backbone_b"], **data.get("backbone_b", {})})
    zipper = _build("zipper", ZipperConfig, dict(data.get("zipper", {})))
    try:
        zipper.validate(backbone_a, backbone_b)
    except ConfigError as e:
        raise ConfigError(f"zipper.n_zips: {e}") from e

    pretrain_values = dict(data.get("pretrain", {}))
    pretrain_text = pretrain_values.pop("text", False)
    train_values = dict(data.get("train", {}))
    baseline_dropout = train_values.pop("baseline_dropout", BASELINE_DROPOUT)
    learning_rates = tuple(train_values.pop("learning_rates", LEARNING_RATE_GRID))
    sweep_values = dict(data.get("sweep", {}))
    ablation_n_zips = tuple(sweep_values.pop("ablation_n_zips", (0, 1, 2, 4)))
    sweep = SweepSettings(**{k: tuple(v) for k, v in sweep_values.items()})

    return ExperimentConfig(
        seed=seed,
        output_dir=data.get("output_dir", str(settings.ZIPPER_OUTPUT_DIR)),
        backbone_a=backbone_a,
        backbone_b=backbone_b,
        zipper=zipper,
        pretrain=_build("pretrain", PretrainSpec, {**pretrain_values, "seed": seed}),
        train=_build("train", TrainSpec, {**train_values, "seed": seed}),
        corpus=_build("corpus", CorpusSettings, {**data.get("corpus", {}), "seed": seed}),
        eval=_build("eval", EvalSettings, dict(data.get("eval", {}))),
        sweep=sweep,
        pretrain_text=pretrain_text,
        baseline_dropout=baseline_dropout,
        learning_rates=learning_rates,
        ablation_n_zips=ablation_n_zips,
    )


def load_config_dict(data):
    serializer = ExperimentSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigError("invalid experiment config: " + "; ".join(flatten_errors(serializer.errors)))
    return materialize(serializer.validated_data)


def load_config(path=None):
    """Experiment from a JSON file; ``None`` gives the defaults."""
    if path is None:
        return load_config_dict({})
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = JSONParser().parse(io.BytesIO(path.read_bytes()))
    except ParseError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    logger.info(f"Loaded experiment config from {path}")
    return load_config_dict(data)
