"""evrank: evidence-driven agentic reranking for multimodal retrieval.

A coarse-to-fine pipeline: fast cosine top-K retrieval, then an agentic
policy that inspects candidates (full images, zoomed crops) inside sliding
windows and emits listwise rankings, with reward shaping and group-relative
advantages for trajectory scoring.
"""

from ._version import ENGINE_VERSION as __version__
from .backends import (
    BackendError,
    CallableBackend,
    FixedTurnsBackend,
    HttpBackend,
    IdentityBackend,
    OracleBackend,
    ReplayBackend,
)
from .config import EngineConfig, load_config
from .eapo import (
    AdvantageGroup,
    EapoConfig,
    RewardBreakdown,
    eapo_objective,
    group_advantages,
    reward_format,
    reward_rank,
    reward_tool,
    reward_total,
    rsft_filter,
)
from .episode import (
    EpisodeLimits,
    ReplayDivergenceError,
    Trajectory,
    TrajectoryStep,
    replay_episode,
    run_episode,
)
from .metrics import (
    BenchmarkReport,
    QueryResult,
    map_at_k,
    recall_at_k,
    run_benchmark,
)
from .protocol import (
    ParsedTurn,
    PromptTemplate,
    ToolCall,
    load_template,
    normalize_ranklist,
    parse_turn,
    render_prompt,
    serialize_turn,
)
from .rerank import GlobalRanking, WindowPlan, plan_windows, rerank_sliding
from .store import (
    Candidate,
    EmbeddingMatrix,
    Modality,
    Pool,
    Query,
    RetrievalHit,
    cosine_topk,
    ingest_manifest,
    load_embeddings,
    load_query_manifest,
    write_embeddings,
)
from .tools import Observation, ToolError, execute, select_image, zoom_in

__all__ = [name for name in dir() if not name.startswith("_")]
