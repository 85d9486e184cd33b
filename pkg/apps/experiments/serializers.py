from rest_framework import serializers

from apps.numeric.optim import OPTIMIZERS
from apps.training.builders import MODEL_KINDS
from apps.training.objectives import LOSS_SCOPES


class StrictSerializer(serializers.Serializer):
    """Rejects keys the serializer does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ["Unknown key."] for key in unknown})
        return super().to_internal_value(data)


class BackboneSerializer(StrictSerializer):
    d_model = serializers.IntegerField(min_value=1, required=False)
    n_layers = serializers.IntegerField(min_value=1, required=False)
    n_heads = serializers.IntegerField(min_value=1, required=False)
    d_ff = serializers.IntegerField(min_value=1, required=False)
    max_seq_len = serializers.IntegerField(min_value=1, required=False)
    dropout = serializers.FloatField(min_value=0, max_value=0.99, required=False)


class ZipperSerializer(StrictSerializer):
    i_a = serializers.IntegerField(min_value=1, required=False)
    i_b = serializers.IntegerField(min_value=1, required=False)
    n_zips = serializers.IntegerField(min_value=0, required=False)
    proj_hidden = serializers.IntegerField(min_value=1, required=False)
    input_proj_layers = serializers.IntegerField(min_value=1, required=False)
    enable_input_proj_a = serializers.BooleanField(required=False)
    enable_input_proj_b = serializers.BooleanField(required=False)
    freeze_a = serializers.BooleanField(required=False)
    freeze_b = serializers.BooleanField(required=False)
    share_cross_projections = serializers.BooleanField(required=False)
    dropout = serializers.FloatField(min_value=0, max_value=0.99, required=False)


class PretrainSerializer(StrictSerializer):
    steps = serializers.IntegerField(min_value=0, required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False)
    learning_rate = serializers.FloatField(min_value=0, required=False)
    grad_clip_max_norm = serializers.FloatField(min_value=0, required=False)
    optimizer = serializers.ChoiceField(choices=sorted(OPTIMIZERS), required=False)
    heldout_fraction = serializers.FloatField(min_value=0, max_value=1, required=False)
    max_heldout = serializers.IntegerField(min_value=1, required=False)
    text = serializers.BooleanField(required=False)


class TrainSerializer(StrictSerializer):
    steps = serializers.IntegerField(min_value=0, required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False)
    learning_rate = serializers.FloatField(required=False)
    grad_clip_max_norm = serializers.FloatField(min_value=0, required=False)
    task_mix = serializers.ListField(
        child=serializers.FloatField(min_value=0), min_length=2, max_length=2, required=False)
    loss_scope = serializers.ChoiceField(choices=LOSS_SCOPES, required=False)
    optimizer = serializers.ChoiceField(choices=sorted(OPTIMIZERS), required=False)
    checkpoint_every = serializers.IntegerField(min_value=0, required=False)
    log_every = serializers.IntegerField(min_value=0, required=False)
    baseline_dropout = serializers.FloatField(min_value=0, max_value=0.99, required=False)
    learning_rates = serializers.ListField(
        child=serializers.FloatField(), min_length=1, required=False)

    def validate_learning_rate(self, value):
        if not value > 0:
            raise serializers.ValidationError("Must be positive.")
        return value


class CorpusSerializer(StrictSerializer):
    n_pairs = serializers.IntegerField(min_value=1, required=False)
    fraction = serializers.FloatField(min_value=0, max_value=1, required=False)
    n_unpaired = serializers.IntegerField(min_value=0, required=False)
    n_unpaired_text = serializers.IntegerField(min_value=0, required=False)
    n_heldout = serializers.IntegerField(min_value=1, required=False)
    noise = serializers.FloatField(min_value=0, max_value=1, required=False)
    min_words = serializers.IntegerField(min_value=1, required=False)
    max_words = serializers.IntegerField(min_value=1, required=False)
    max_chars = serializers.IntegerField(min_value=1, required=False)
    codebook_seed = serializers.IntegerField(min_value=0, required=False)
    codes_per_char = serializers.IntegerField(min_value=1, required=False)

    def validate(self, attrs):
        if attrs.get("min_words", 1) > attrs.get("max_words", attrs.get("min_words", 1)):
            raise serializers.ValidationError({"min_words": ["Must not exceed max_words."]})
        return attrs


class EvalSerializer(StrictSerializer):
    max_examples = serializers.IntegerField(min_value=1, required=False)
    max_text_tokens = serializers.IntegerField(min_value=1, required=False)
    max_speech_tokens = serializers.IntegerField(min_value=1, required=False)
    bucket_edges = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1, required=False)
    alpha = serializers.FloatField(min_value=0, max_value=1, required=False)

    def validate_bucket_edges(self, value):
        if any(b <= a for a, b in zip(value, value[1:])):
            raise serializers.ValidationError("Edges must be strictly increasing.")
        return value


class SweepSerializer(StrictSerializer):
    fractions = serializers.ListField(
        child=serializers.FloatField(min_value=0, max_value=1), min_length=1, required=False)
    kinds = serializers.ListField(child=serializers.ChoiceField(choices=MODEL_KINDS), min_length=1, required=False)
    seeds = serializers.ListField(child=serializers.IntegerField(min_value=0), min_length=1, required=False)
    ablation_n_zips = serializers.ListField(child=serializers.IntegerField(min_value=0), min_length=1, required=False)


class ExperimentSerializer(StrictSerializer):
    seed = serializers.IntegerField(min_value=0, required=False)
    output_dir = serializers.CharField(required=False)
    backbone_a = BackboneSerializer(required=False)
    backbone_b = BackboneSerializer(required=False)
    zipper = ZipperSerializer(required=False)
    pretrain = PretrainSerializer(required=False)
    train = TrainSerializer(required=False)
    corpus = CorpusSerializer(required=False)
    eval = EvalSerializer(required=False)
    sweep = SweepSerializer(required=False)


def flatten_errors(errors, prefix=""):
    """``{"zipper": {"n_zips": ["..."]}}`` -> ``["zipper.n_zips: ..."]``."""
    if isinstance(errors, dict):
        lines = []
        for key, value in errors.items():
            path = key if not prefix else (prefix if key == "non_field_errors" else f"{prefix}.{key}")
            lines.extend(flatten_errors(value, path))
        return lines
    if isinstance(errors, list) and errors and all(isinstance(e, str) for e in errors):
        return [f"{prefix}: {message}" for message in errors]
    if isinstance(errors, list):
        lines = []
        for index, value in enumerate(errors):
            lines.extend(flatten_errors(value, f"{prefix}.{index}"))
        return lines
    return [f"{prefix}: {errors}"]
