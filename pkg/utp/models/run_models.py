from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


# ==================== Training log ====================

class StepRecord(BaseModel):
    """One optimizer step."""

    step: int = Field(..., description="1-based step counter")
    L: float = Field(..., description="Total loss")
    L_mlm: float = Field(0.0, description="Universal MLM component")
    L_cmcr: float = Field(0.0, description="Contrastive component")
    L_retrieval: float = Field(0.0, description="Bi-encoder InfoNCE during retrieval fine-tuning")
    L_qa: float = Field(0.0, description="Cell-selection BCE during QA fine-tuning")
    lr: float = Field(..., description="Learning rate used for this step")


class EvalRecord(BaseModel):
    """Evaluation at a step boundary."""

    step: int = Field(..., description="Step after which evaluation ran")
    metrics: Dict[str, float] = Field(default_factory=dict, description="Dev metrics")


class TrainLog(BaseModel):
    """Per-step losses and per-eval metrics, in step order."""

    steps: List[StepRecord] = Field(default_factory=list)
    evals: List[EvalRecord] = Field(default_factory=list)

    @model_validator(mode='after')
    def validate_increasing(self):
        for prev, cur in zip(self.steps, self.steps[1:]):
            if cur.step <= prev.step:
                raise ValueError(f'Steps must be strictly increasing: {prev.step} then {cur.step}')
        return self

    def losses(self) -> List[float]:
        return [s.L for s in self.steps]


# ==================== Retrieval ====================

class RankedTable(BaseModel):
    table_id: str = Field(..., description="Retrieved table id")
    score: float = Field(..., description="Similarity score")


class QueryRanking(BaseModel):
    """Ranked tables for one query, scores non-increasing."""

    query_id: str = Field(..., description="Query (pair) id")
    ranking: List[RankedTable] = Field(default_factory=list)

    @model_validator(mode='after')
    def validate_ranking(self):
        ids = [r.table_id for r in self.ranking]
        if len(ids) != len(set(ids)):
            raise ValueError(f'Duplicate table ids in ranking for query {self.query_id}')
        for a, b in zip(self.ranking, self.ranking[1:]):
            if b.score > a.score:
                raise ValueError(f'Scores must be non-increasing for query {self.query_id}')
        return self

    def table_ids(self) -> List[str]:
        return [r.table_id for r in self.ranking]


class RetrievalRun(BaseModel):
    queries: List[QueryRanking] = Field(default_factory=list)


class HardNegativeSet(BaseModel):
    """Mined negatives per query; ``short_queries`` got fewer than requested."""

    per_query: int = Field(..., description="Requested negatives per query")
    negatives: Dict[str, List[str]] = Field(default_factory=dict, description="query id -> table ids")
    short_queries: List[str] = Field(default_factory=list, description="Queries with fewer than per_query")

    @field_validator('per_query')
    @classmethod
    def validate_per_query(cls, v):
        if v < 1:
            raise ValueError('per_query must be at least 1')
        return v


# ==================== QA ====================

class QAPrediction(BaseModel):
    example_id: str = Field(..., description="Example (pair) id")
    predicted_cells: List[List[int]] = Field(default_factory=list, description="Cells with probability ≥ 0.5")
    gold_cells: List[List[int]] = Field(default_factory=list)


# ==================== Manifests ====================

class RunManifest(BaseModel):
    """Everything needed to re-run a command and reproduce its outputs."""

    command: str = Field(..., description="Subcommand name")
    config: Dict[str, Any] = Field(default_factory=dict, description="Fully resolved configuration")
    seed: int = Field(..., description="Root seed")
    input_hashes: Dict[str, str] = Field(default_factory=dict, description="sha256 per input path")
    output_paths: List[str] = Field(default_factory=list)
    wall_time_s: float = Field(default=0.0, description="Elapsed wall-clock seconds")
    extra: Optional[Dict[str, Any]] = Field(None, description="Command-specific details")
