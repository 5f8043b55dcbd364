"""Reinforcement finetuning toolkit for span-based document information extraction."""

from .corpus import (
    AnswerAnnotation,
    Corpus,
    CorpusError,
    Document,
    FieldSchema,
    GeneratorConfig,
    InvariantViolation,
    ParseError,
    Token,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    subset_fraction,
)
from .evaluation import EvalReport, FieldResult, evaluate, extract_all, render_report
from .model import (
    CheckpointError,
    ModelConfig,
    SpanAction,
    SpanDistribution,
    SpanPolicy,
    greedy_decode,
    load_checkpoint,
    sample_action,
    save_checkpoint,
    top_k_candidates,
)
from .ppo import (
    AdvantageEstimate,
    PPOConfig,
    RewardConfig,
    Trajectory,
    Transition,
    collect_trajectories,
    compute_advantages,
    finetune,
    ppo_surrogate,
)
from .rewards import (
    RewardBreakdown,
    RewardWeights,
    StandInEncoder,
    label_reward,
    levenshtein,
    location_reward,
    majority_label,
    semantic_reward,
    string_reward,
    unified_reward,
)
from .sl import SLConfig, TrainingDiverged, ce_loss, train_supervised

__version__ = "0.1.0"
