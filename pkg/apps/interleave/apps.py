from django.apps import AppConfig


class InterleaveConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'apps.interleave'
