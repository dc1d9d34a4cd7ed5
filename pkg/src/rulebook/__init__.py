"""Decision-set rulebook learning, distillation data engine, and RL batching.

The pipeline has three model-facing stages behind one cacheable gateway:
learn a rulebook of stand-alone natural-language rules by iterative candidate
generation and subset search; collect rulebook-grounded teacher traces with
rejection sampling for distillation; and build class-balanced, variance-
filtered rollout batches (with exact group-relative advantages) for an
external RL trainer, folding successful strategies back into the rulebook.
"""

from .batching import (
    BatcherConfig,
    ClassQuota,
    Rollout,
    RolloutGroup,
    SyntheticRolloutProvider,
    TrainingBatch,
    build_batch,
    class_quotas,
    combined_advantages,
    correctness_reward,
    group_advantages,
)
from .classify import RuleClassifier
from .config import RunConfig, load_config
from .distill import (
    DistillConfig,
    DistillationSet,
    TeacherSampler,
    TeacherTrace,
    balance_upsample,
    build_distillation_set,
    export_rsft,
)
from .errors import RulebookError
from .gateway import ChatRequest, ChatResponse, Gateway, HttpBackend
from .labels import Example, LabelSpace, load_dataset, save_dataset
from .metrics import balanced_accuracy, macro_f1
from .mock import MockBackend, MockScript, token_world_script
from .optimizer import OptimizerConfig, OptimizerState, SpoOptimizer, load_snapshot, save_snapshot
from .parsing import (
    ParseFailure,
    judge_expected_score,
    parse_firing,
    parse_reasoning_label,
    parse_rule_candidates,
)
from .revision import (
    PairedTrace,
    ReviseConfig,
    RevisionPipeline,
    StrategyTaxonomy,
    collect_hard_successes,
    run_revision,
    select_on_val_hard,
)
from .rules import (
    ActiveSet,
    FiringTable,
    Provenance,
    Rule,
    RulePool,
    compose,
    evaluate_subset,
    load_sop,
    parse_sop,
    save_sop,
    serialize_sop,
)
from .search import beam_select, exhaustive_select
from .task import TaskProfile
from .templates import PromptTemplate, render

__version__ = "0.1.0"
