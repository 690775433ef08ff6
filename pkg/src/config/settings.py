import os
from dotenv import load_dotenv

load_dotenv()


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in {"1", "true", "yes", "on"}


class Settings:
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    DEVICE: str = os.getenv("DEVICE", "cpu")
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "./runs")
    EMBEDDING_CACHE_PATH: str = os.getenv("EMBEDDING_CACHE_PATH", "./embeddings.db")
    NUM_THREADS: int = int(os.getenv("NUM_THREADS", "0"))
    PROGRESS_BAR: bool = _flag("PROGRESS_BAR", "true")

    # Numerical guards
    EPSILON: float = 1e-8

    # Weather prior weights (higher = easier)
    WEATHER_WEIGHTS: dict = {
        "sunny": 5.0,
        "sunset_night": 4.5,
        "cloudy": 4.0,
        "foggy": 3.5,
        "rainstorm": 3.0,
    }
    MAX_WEATHER_WEIGHT: float = 5.0
    WEATHER_PHRASES: dict = {
        "sunny": "sunny",
        "cloudy": "cloudy",
        "foggy": "foggy",
        "rainstorm": "rainstorm",
        "sunset_night": "sunset and night",
    }

    # Optimisation defaults
    LEARNING_RATE: float = 0.002
    MOMENTUM: float = 0.9
    BATCH_SIZE: int = 16

    # Loss weights
    ALPHA_SKD: float = 0.3
    BETA_OFFSET: float = 1.0
    GAMMA_OFFSET: float = 0.2
    KAPPA_CONFIDENCE: float = 0.4

    # Curriculum / adaptive scalar
    LAMBDA0: float = 0.5
    GROWTH_RATE: float = 2.0
    MU_PERIOD: int = 1000
    TAU_MAX: float = 5.0

    # Token perturbation
    DEFAULT_ALTERNATE_BLOCKS: tuple = (0, 4, 8)

    # Model
    DISCRIMINATOR_HIDDEN: int = 256
    CLASSIFIER_DROPOUT: float = 0.1
    REVERSAL_SCALE: float = 1.0

    # Prompt presets
    PROMPT_TEMPLATES: dict = {
        "class-domain": "A photo of a {class} in {domain}",
        "class": "A photo of a {class}",
        "domain": "A photo in {domain}",
    }
    QUALITY_PROMPTS: tuple = ("Good photo.", "Bad photo.")

    MARITIME_CLASSES: list = [
        "aircraft carrier", "barge", "cruise ship", "destroyer", "ferry boat",
        "fishing boat", "freight ship", "inflatable boat", "lighthouse",
        "maritime buoy", "motorboat", "pleasure boat", "sailboat", "submarine",
        "tug",
    ]

    # File format versions
    MANIFEST_VERSION: int = 1
    CACHE_SCHEMA_VERSION: int = 1
    CHECKPOINT_VERSION: int = 1

    # Run artefacts
    INVOCATION_FILE: str = "invocation.json"
    METRICS_FILE: str = "metrics.jsonl"
    SCORES_FILE: str = "scores.jsonl"
    RESULTS_FILE: str = "results.json"
    PREDICTIONS_FILE: str = "predictions.csv"


settings = Settings()
