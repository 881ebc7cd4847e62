"""Deterministic simulation of dynamic content update at a cache-enabled base
station: Zipf workloads, the serve/update decision process, classical
replacement baselines, and DRL agents (factorized DQN and the external-memory
recurrent Q-network), plus an experiment harness and CLI.
"""

from .workload import (
    Catalog,
    RequestBatch,
    TraceHeader,
    TraceParseError,
    build_catalog,
    read_trace,
    sample_slot_requests,
    write_trace,
)
from .cache_env import (
    ActionVector,
    CacheEnv,
    CumulativeLedger,
    SlotOutcome,
    SystemState,
    apply_update,
    candidate_set,
    compute_reward,
    serve_requests,
    threshold_rule,
    update_ledger,
)
from .baselines import (
    FifoPolicy,
    LeastRequestedPolicy,
    LruPolicy,
    PolicyBookkeeping,
    RandomPolicy,
    ThresholdPolicy,
    fifo_decide,
    least_requested_decide,
    lru_decide,
    random_decide,
)
from .grad_core import (
    Adam,
    CheckpointError,
    Dense,
    LstmCell,
    Param,
    Relu,
    TrainingError,
    huber_loss,
    kaiming_init,
    load_checkpoint,
    save_checkpoint,
)
from .agent_dqn import (
    DqnAgent,
    EncodedState,
    QNetwork,
    ReplayBuffer,
    Transition,
    encode_state,
    epsilon_schedule,
    select_action,
)
from .agent_emrqn import (
    EmrqnAgent,
    ExternalMemory,
    ExternalMemoryEntry,
    RecurrentQNetwork,
    discounted_returns,
    emrqn_select_action,
    memory_insert,
    modify_q,
    run_episode,
    similarity,
)
from .harness import (
    ConfigError,
    ExperimentConfig,
    desk_preset,
    load_config,
    main,
    make_policy,
    parse_config_text,
    run_seed,
)

__version__ = "0.1.0"
