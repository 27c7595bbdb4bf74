# ============================================================
# Configurações do processo (variáveis de ambiente com padrão).
# A configuração de cada rodada de treino fica em JSON; veja
# config.example.json.
# ============================================================
import os

RUNS_DIR = os.getenv("RUNS_DIR", "runs")
REDIS_URL = os.getenv("REDIS_URL", "redis://localhost:6379/0")
SWEEP_QUEUE = os.getenv("SWEEP_QUEUE", "capsie_sweep_queue")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
DEFAULT_SEED = int(os.getenv("DEFAULT_SEED", "0"))
