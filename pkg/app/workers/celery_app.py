"""
Celery application configuration for Pitch Kinematics.
Distributes sliding-window fits across workers.
"""
from celery import Celery

from app.config import settings

# Create Celery app
celery_app = Celery(
    "pitchkin",
    broker=settings.celery_broker,
    backend=settings.celery_backend,
    include=['app.workers.celery_worker']
)

# Configure Celery
celery_app.conf.update(
    task_serializer=settings.CELERY_TASK_SERIALIZER,
    result_serializer=settings.CELERY_RESULT_SERIALIZER,
    accept_content=settings.CELERY_ACCEPT_CONTENT,
    timezone=settings.CELERY_TIMEZONE,
    enable_utc=settings.CELERY_ENABLE_UTC,
    result_expires=3600,  # window results are collected right away
    task_track_started=True,
    task_time_limit=300,  # one window fit is well under a second
    worker_concurrency=settings.CELERY_WORKER_CONCURRENCY,
    worker_prefetch_multiplier=4,
    broker_connection_retry_on_startup=True,
    task_always_eager=settings.CELERY_ALWAYS_EAGER,
    task_eager_propagates=True,
)

if __name__ == '__main__':
    celery_app.start()
