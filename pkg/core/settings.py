import environ

from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

env = environ.Env(
    DEBUG=(bool, False),
    ZIPPER_DEFAULT_SEED=(int, 0),
    ZIPPER_LOG_LEVEL=(str, "INFO"),
    ZIPPER_SLOW_TESTS=(bool, False),
    CELERY_TASK_ALWAYS_EAGER=(bool, True),
)
environ.Env.read_env(BASE_DIR / ".env")


# Command-line only project: no hosts, no middleware, no templates.
SECRET_KEY = env("SECRET_KEY", default="zipper-local-only")

DEBUG = env("DEBUG")

ALLOWED_HOSTS = env.list("ALLOWED_HOSTS", default=[])

DJANGO_APPS = [
    'django.contrib.auth',
    'django.contrib.contenttypes',
]

PROJECT_APPS = [
    'apps.numeric',
    'apps.backbone',
    'apps.interleave',
    'apps.fusion',
    'apps.synthdata',
    'apps.training',
    'apps.inference',
    'apps.evalkit',
    'apps.experiments',
]

THIRD_PARTY_APPS = [
    'rest_framework',
    'django_celery_results',
]

INSTALLED_APPS = DJANGO_APPS + PROJECT_APPS + THIRD_PARTY_APPS

# Database
# https://docs.djangoproject.com/en/4.2/ref/settings/#databases

DATABASES = {
    'default': env.db("DATABASE_URL", default=f"sqlite:///{BASE_DIR / 'db.sqlite3'}"),
}

LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


REST_FRAMEWORK = {
    # metrics and checkpoint metadata must stay plain JSON
    "STRICT_JSON": True,
    "COMPACT_JSON": True,
}


# Experiments

ZIPPER_OUTPUT_DIR = Path(env("ZIPPER_OUTPUT_DIR", default=str(BASE_DIR / "runs")))
ZIPPER_DEFAULT_SEED = env("ZIPPER_DEFAULT_SEED")
ZIPPER_LOG_LEVEL = env("ZIPPER_LOG_LEVEL")
# long seeded acceptance runs in the test suite
ZIPPER_SLOW_TESTS = env("ZIPPER_SLOW_TESTS")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "simple": {"format": "{asctime} {levelname} {name}: {message}", "style": "{"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "simple"},
    },
    "loggers": {
        "apps": {"handlers": ["console"], "level": ZIPPER_LOG_LEVEL, "propagate": False},
        "celery": {"handlers": ["console"], "level": "WARNING"},
    },
}


# Celery: sweep cells run in-process unless a broker is configured

CELERY_ACCEPT_CONTENT = ["json"]
CELERY_TASK_SERIALIZER = "json"
CELERY_RESULT_SERIALIZER = "json"
CELERY_TIMEZONE = TIME_ZONE

CELERY_BROKER_URL = env("CELERY_BROKER_URL", default="memory://")
CELERY_TASK_ALWAYS_EAGER = env("CELERY_TASK_ALWAYS_EAGER")
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_BROKER_TRANSPORT_OPTIONS = {
    'visibility_timeout': 3600,
    'socket_timeout': 5,
    'retry_on_timeout': True
}

CELERY_RESULT_BACKEND = 'django-db'

CELERY_IMPORTS = (
    'apps.evalkit.tasks',
)
