import os
from pydantic_settings import BaseSettings

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

class Settings(BaseSettings):
    PROJECT_NAME: str = "Compliance Interpretability Workbench"
    PROJECT_VERSION: str = "0.1.0"

    # Model files (GPT-2 Small, safetensors + published vocab/merges)
    MODEL_DIR: str = os.getenv("MODEL_DIR", "models/gpt2")
    WEIGHTS_FILE: str = os.getenv("WEIGHTS_FILE", "model.safetensors")
    VOCAB_FILE: str = os.getenv("VOCAB_FILE", "vocab.json")
    MERGES_FILE: str = os.getenv("MERGES_FILE", "merges.txt")

    DATA_DIR: str = os.getenv("DATA_DIR", os.path.join(PROJECT_ROOT, "data"))
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "results")

    # Analysis defaults
    PREPEND_BOS: bool = os.getenv("PREPEND_BOS", "true").lower() in ("1", "true", "yes")
    SEED: int = int(os.getenv("SEED", "0"))

    # Sweep cells run on this many threads; 1 keeps everything on the caller's thread
    SWEEP_WORKERS: int = int(os.getenv("SWEEP_WORKERS", "1"))

    SCHEMA_VERSION: int = 1
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    @property
    def weights_path(self) -> str:
        return os.path.join(self.MODEL_DIR, self.WEIGHTS_FILE)

    @property
    def vocab_path(self) -> str:
        return os.path.join(self.MODEL_DIR, self.VOCAB_FILE)

    @property
    def merges_path(self) -> str:
        return os.path.join(self.MODEL_DIR, self.MERGES_FILE)

settings = Settings()
