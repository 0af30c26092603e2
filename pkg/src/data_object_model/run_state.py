"""Typed configuration and result records for every pipeline stage."""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from data_object_model.errors import ConfigError

ABLATION_MODES = ("full", "no_gscl", "no_gecl", "none")
SAMPLING_STRATEGIES = ("random", "on_top")
SCORE_HEADS = ("concat", "concat_distance")
EVAL_SPLITS = ("test", "validation")


@dataclass
class GraphConfig:
    min_count: int = 2
    max_words_per_doc: int = 128
    window_size: int = 5
    workers: int = 1

    def validate(self) -> "GraphConfig":
        if self.min_count < 1:
            raise ConfigError("graph.min_count must be >= 1")
        if self.max_words_per_doc < 1:
            raise ConfigError("graph.max_words_per_doc must be >= 1")
        if self.window_size < 1:
            raise ConfigError("graph.window_size must be >= 1")
        return self


@dataclass
class EncoderConfig:
    embedding_dim: int = 300
    hidden_dim: int = 100
    output_dim: int = 300
    init_scale: float = 0.1
    pretrained_vectors: Optional[str] = None


@dataclass
class PretrainConfig:
    alpha: float = 0.5
    batch_size: int = 128
    learning_rate: float = 0.0001
    epochs: int = 50
    tau: float = 0.5
    gru_hidden: int = 300
    seed: int = 7
    mode: str = "full"
    checkpoint: str = "checkpoints/pretrain.ckpt"

    def validate(self) -> "PretrainConfig":
        if self.alpha < 0:
            raise ConfigError("pretrain.alpha must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("pretrain.batch_size must be >= 2")
        if self.tau <= 0:
            raise ConfigError("pretrain.tau must be > 0")
        if self.mode not in ABLATION_MODES:
            raise ConfigError(f"pretrain.mode must be one of {ABLATION_MODES}, got {self.mode!r}")
        return self


@dataclass
class FewShotConfig:
    C: int = 5
    K: int = 5
    L: int = 15
    episode_batch: int = 64
    learning_rate: float = 0.001
    epochs: int = 300
    steps_per_epoch: int = 1
    val_episodes: int = 200
    val_fraction: float = 0.3
    train_min_count: int = 20
    test_min_count: int = 2
    strategy: str = "random"
    head: str = "concat_distance"
    eval_episodes: int = 500
    split: str = "test"
    max_train_classes: int = 0
    class_strategy: str = "random"
    seed: int = 7
    checkpoint: str = "checkpoints/fewshot.ckpt"

    def validate(self) -> "FewShotConfig":
        if self.C < 1 or self.K < 1 or self.L < 1:
            raise ConfigError("fewshot.C, fewshot.K and fewshot.L must be >= 1")
        if self.episode_batch < 1:
            raise ConfigError("fewshot.episode_batch must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("fewshot.val_fraction must lie in (0, 1)")
        if self.strategy not in SAMPLING_STRATEGIES:
            raise ConfigError(f"fewshot.strategy must be one of {SAMPLING_STRATEGIES}")
        if self.class_strategy not in SAMPLING_STRATEGIES:
            raise ConfigError(f"fewshot.class_strategy must be one of {SAMPLING_STRATEGIES}")
        if self.head not in SCORE_HEADS:
            raise ConfigError(f"fewshot.head must be one of {SCORE_HEADS}")
        if self.split not in EVAL_SPLITS:
            raise ConfigError(f"fewshot.split must be one of {EVAL_SPLITS}")
        return self


@dataclass
class SynthConfig:
    n_train_classes: int = 12
    n_test_classes: int = 10
    docs_per_train_class: int = 30
    docs_per_test_class: int = 8
    vocab_size: int = 300
    signal_tokens_per_class: int = 10
    noise_rate: float = 0.7
    doc_length: int = 30
    n_patients: int = 0
    seq_len_min: int = 2
    seq_len_max: int = 5
    coherence: float = 0.6
    entity_fraction: float = 0.5
    seed: int = 7

    def validate(self) -> "SynthConfig":
        if self.n_train_classes < 1 or self.n_test_classes < 1:
            raise ConfigError("synth needs at least one train and one test class")
        if self.docs_per_train_class <= 20:
            raise ConfigError("synth.docs_per_train_class must be > 20")
        if not 2 <= self.docs_per_test_class <= 10:
            raise ConfigError("synth.docs_per_test_class must lie in [2, 10]")
        if self.signal_tokens_per_class < 1:
            raise ConfigError("synth.signal_tokens_per_class must be >= 1")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("synth.noise_rate must lie in [0, 1)")
        if not 0.0 <= self.coherence <= 1.0:
            raise ConfigError("synth.coherence must lie in [0, 1]")
        if not 0.0 <= self.entity_fraction <= 1.0:
            raise ConfigError("synth.entity_fraction must lie in [0, 1]")
        if self.doc_length < 1:
            raise ConfigError("synth.doc_length must be >= 1")
        if not 1 <= self.seq_len_min <= self.seq_len_max:
            raise ConfigError("synth needs 1 <= seq_len_min <= seq_len_max")
        if self.noise_rate > 0 and self.vocab_size < 1:
            raise ConfigError("synth.vocab_size must be >= 1 when noise_rate > 0")
        return self


@dataclass
class ReportConfig:
    k_max: int = 5
    class_counts: List[int] = field(default_factory=list)
    episodes: int = 500


@dataclass
class RunConfig:
    graph: GraphConfig = field(default_factory=GraphConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    fewshot: FewShotConfig = field(default_factory=FewShotConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    log_level: str = "INFO"

    def validate(self) -> "RunConfig":
        self.graph.validate()
        self.pretrain.validate()
        self.fewshot.validate()
        self.synth.validate()
        return self


@dataclass
class EpisodeResult:
    episode: int
    acc: float
    precision: float
    recall: float
    f1: float
    n_queries: int


@dataclass
class MetricsReport:
    acc: float
    precision: float
    recall: float
    f1: float
    acc_stderr: float
    precision_stderr: float
    recall_stderr: float
    f1_stderr: float
    n_episodes: int
    episodes: List[EpisodeResult] = field(default_factory=list)
    config: Dict[str, object] = field(default_factory=dict)

    def to_primitive(self) -> dict:
        return {
            "acc": self.acc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "acc_stderr": self.acc_stderr,
            "precision_stderr": self.precision_stderr,
            "recall_stderr": self.recall_stderr,
            "f1_stderr": self.f1_stderr,
            "n_episodes": self.n_episodes,
            "config": self.config,
        }
