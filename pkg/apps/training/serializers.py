from rest_framework import serializers


class MetricsRecordSerializer(serializers.Serializer):
    phase = serializers.CharField(max_length=32)
    step = serializers.IntegerField(min_value=0)
    loss = serializers.FloatField()
    grad_norm = serializers.FloatField()
    learning_rate = serializers.FloatField(min_value=0)
