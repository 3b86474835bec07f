from typing import List, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Similarity = Literal["dot", "cosine"]
Modality = Literal["W", "T", "WT"]
CMCRTerm = Literal["t_w", "t_wt", "wt_w"]


class ModelConfig(BaseModel):
    """Encoder shape and structural-channel cardinalities."""

    d: int = Field(default=32, description="Hidden size")
    l: int = Field(default=64, description="Maximum sequence length")  # noqa: E741
    n_layers: int = Field(default=2, description="Transformer layers")
    n_heads: int = Field(default=2, description="Attention heads")
    d_ff: int = Field(default=64, description="Feed-forward size")
    V: int = Field(default=5, description="Vocabulary size, set from the vocabulary")
    n_segments: int = Field(default=2, description="Segment channel cardinality")
    n_columns: int = Field(default=16, description="Column channel cardinality (0 = outside table)")
    n_rows: int = Field(default=32, description="Row channel cardinality (0 = header / outside)")
    n_ranks: int = Field(default=32, description="Rank and inverse-rank channel cardinality")
    n_cell_tokens: int = Field(default=16, description="Cell-token-index channel cardinality")
    n_formats: int = Field(default=3, description="Format channel cardinality (W, T, WT)")
    dropout: float = Field(default=0.1, description="Dropout rate in training mode")
    layernorm_eps: float = Field(default=1e-12, description="Layernorm epsilon")
    seed: int = Field(default=0, description="Initialization seed")

    model_config = ConfigDict(extra='forbid')

    @field_validator('d', 'n_layers', 'n_heads', 'd_ff', 'V', 'n_segments', 'n_columns',
                     'n_rows', 'n_ranks', 'n_cell_tokens', 'n_formats')
    @classmethod
    def validate_positive(cls, v):
        if v < 1:
            raise ValueError('Sizes must be positive')
        return v

    @field_validator('l')
    @classmethod
    def validate_length(cls, v):
        if v < 4:
            raise ValueError('Sequence length must be at least 4 to hold [CLS]/[SEP] framing')
        return v

    @field_validator('dropout')
    @classmethod
    def validate_dropout(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError('Dropout must lie in [0, 1)')
        return v

    @model_validator(mode='after')
    def validate_heads(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f'Hidden size {self.d} is not divisible by {self.n_heads} heads')
        if self.n_segments < 2 or self.n_formats < 3:
            raise ValueError('Need at least 2 segments and 3 formats')
        return self

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


class LossConfig(BaseModel):
    """Contrastive and masking objective settings."""

    tau: float = Field(default=0.05, description="InfoNCE temperature")
    similarity: Similarity = Field(default="dot", description="Similarity for InfoNCE and retrieval")
    symmetric_cmcr: bool = Field(default=False, description="Average both directions of each term")
    use_mlm: bool = Field(default=True, description="Include the universal MLM objective")
    use_cmcr: bool = Field(default=True, description="Include cross-modal contrastive regularization")
    mlm_modalities: List[Modality] = Field(default_factory=lambda: ["W", "T", "WT"],
                                           description="Modalities the MLM objective runs on")
    cmcr_terms: List[CMCRTerm] = Field(default_factory=lambda: ["t_w", "t_wt", "wt_w"],
                                       description="Pairwise contrastive terms to include")
    mask_rate: float = Field(default=0.15, description="Fraction of maskable tokens selected")

    model_config = ConfigDict(extra='forbid')

    @field_validator('tau')
    @classmethod
    def validate_tau(cls, v):
        if v <= 0:
            raise ValueError('Temperature must be positive')
        return v

    @field_validator('mask_rate')
    @classmethod
    def validate_mask_rate(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError('Mask rate must lie in (0, 1)')
        return v


class TrainConfig(BaseModel):
    """Pretraining loop settings (batch 16, lr 5e-5, 10 epochs by default)."""

    batch_size: int = Field(default=16, description="Pairs per step (N)")
    learning_rate: float = Field(default=5e-5, description="Constant AdamW learning rate")
    epochs: int = Field(default=10, description="Passes over the training corpus")
    weight_decay: float = Field(default=0.01, description="Decoupled weight decay")
    tau: float = Field(default=0.05, description="InfoNCE temperature")
    seed: int = Field(default=0, description="Seed for shuffling, masking and dropout")
    eval_every: int = Field(default=0, description="Steps between evaluations (0 = end only)")
    hard_negatives_per_query: int = Field(default=0, description="Mined negatives per query (fine-tune only)")
    max_steps: int = Field(default=0, description="Stop after this many steps (0 = no limit)")

    model_config = ConfigDict(extra='forbid')

    @field_validator('batch_size', 'epochs')
    @classmethod
    def validate_at_least_one(cls, v):
        if v < 1:
            raise ValueError('Must be at least 1')
        return v

    @field_validator('learning_rate')
    @classmethod
    def validate_learning_rate(cls, v):
        if v <= 0:
            raise ValueError('Learning rate must be positive')
        return v

    @field_validator('weight_decay', 'eval_every', 'hard_negatives_per_query', 'max_steps')
    @classmethod
    def validate_non_negative(cls, v):
        if v < 0:
            raise ValueError('Must be non-negative')
        return v

    @field_validator('tau')
    @classmethod
    def validate_tau(cls, v):
        if v <= 0:
            raise ValueError('Temperature must be positive')
        return v


def retrieval_finetune_defaults(**overrides) -> TrainConfig:
    """Retrieval fine-tuning defaults: batch 32, lr 2e-5, 100 epochs, decay 0.01."""
    values = dict(batch_size=32, learning_rate=2e-5, epochs=100, weight_decay=0.01)
    values.update(overrides)
    return TrainConfig(**values)


def qa_finetune_defaults(**overrides) -> TrainConfig:
    """Desk-scale cell-selection defaults: batch 8, lr 1e-3, at most 300 steps."""
    values = dict(batch_size=8, learning_rate=1e-3, epochs=1000, weight_decay=0.01, max_steps=300)
    values.update(overrides)
    return TrainConfig(**values)


class ExperimentConfig(BaseModel):
    """Contents of a --config JSON file."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    model_config = ConfigDict(extra='forbid', protected_namespaces=())
