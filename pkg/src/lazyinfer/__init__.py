"""CPU transformer inference runtime with progressive token pruning.

Tokens are scored by the previous layer's attention on the newest token and
pruned per a layer-wise schedule during both prefill and decoding; pruned
tokens can be revived later from an aux cache of their hidden states, so every
token passes each layer at most once per generation.
"""

from .bench import (
    FidelityResult,
    GenerationReport,
    SweepCell,
    attention_profile,
    cumulative_usage_series,
    fidelity,
    measure_generation,
    measure_ttft,
    percent_prompt_tokens_computed,
    run_generation,
    run_sweep,
)
from .cache import LayeredCaches
from .engine import (
    BOS_ID,
    EOS_ID,
    ComputeLedger,
    GenerationSession,
    detokenize,
    greedy_sample,
    tokenize,
)
from .errors import (
    ConfigError,
    DegenerateRowError,
    InputError,
    InvariantViolation,
    LazyInferError,
    MissingAuxError,
    MissingKvError,
    ShapeError,
    WeightFormatError,
)
from .model import (
    LayerOutput,
    LayerWeights,
    ModelConfig,
    ModelWeights,
    embed,
    generate_random_model,
    layer_forward,
    load_model,
    logits,
    save_model,
)
from .pruning import (
    PruningSchedule,
    format_schedule,
    importance_scores,
    parse_schedule,
    random_keep_set,
    select_keep_set,
    static_keep_set,
    validate_schedule,
)

__version__ = "0.1.0"
