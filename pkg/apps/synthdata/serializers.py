from rest_framework import serializers

from .tokenizers import SPEECH_VOCAB_SIZE

SPLITS = (
    ("paired", "Paired"),
    ("unpaired_speech", "Unpaired speech"),
    ("unpaired_text", "Unpaired text"),
    ("heldout_clean", "Held-out clean"),
    ("heldout_other", "Held-out other"),
)


class CorpusRecordSerializer(serializers.Serializer):
    id = serializers.CharField(max_length=64)
    text = serializers.CharField(allow_blank=True, trim_whitespace=False)
    speech_tokens = serializers.ListField(
        child=serializers.IntegerField(min_value=0, max_value=SPEECH_VOCAB_SIZE - 1)
    )
    split = serializers.ChoiceField(choices=SPLITS)
