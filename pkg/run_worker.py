import logging

from redis import Redis
from rq import Queue, SimpleWorker

import config
from app import configure_logging

logger = logging.getLogger("Worker")

# Filas que o worker vai ouvir
listen = [config.SWEEP_QUEUE]


def run_worker():
    configure_logging()
    redis_conn = Redis.from_url(config.REDIS_URL)
    logger.info(f"Iniciado. Conectado em: {config.REDIS_URL}")
    logger.info(f"Ouvindo filas: {listen}")

    queues = [Queue(name, connection=redis_conn) for name in listen]
    worker = SimpleWorker(queues, connection=redis_conn)

    # burst=False => fica ouvindo continuamente
    worker.work(burst=False)


if __name__ == "__main__":
    run_worker()
