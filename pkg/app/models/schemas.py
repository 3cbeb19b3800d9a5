from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict, Any
from datetime import datetime
from enum import Enum


class FrequencyFeatures(str, Enum):
    fft = "fft"
    none = "none"


class LamKind(str, Enum):
    action = "action"
    image = "image"


class StrategyName(str, Enum):
    baseline = "baseline"
    la_align = "la_align"
    la_direct = "la_direct"
    la_cond = "la_cond"
    la_tok = "la_tok"
    direct_c = "direct_c"
    tok_c = "tok_c"
    ph_direct = "ph_direct"
    ph_cond = "ph_cond"


class SuiteName(str, Enum):
    placeholder = "placeholder"
    align_layer = "align_layer"
    lambda_ = "lambda"
    data_fraction = "data_fraction"
    disc_vs_cont = "disc_vs_cont"
    joint = "joint"
    all = "all"


class RunStatus(str, Enum):
    ok = "ok"
    failed = "failed"


# ==================== Latent Action Model Configs ====================

class ActionLamConfig(BaseModel):
    horizon: int = Field(default=8, gt=0, description="Chunk length H")
    action_dim: int = Field(default=3, gt=0, description="Action dimension m")
    codebook_size: int = Field(default=256, gt=0, description="K_act")
    latent_dim: int = Field(default=128, gt=0, description="Code dimension d")
    kernel_size: int = Field(default=3, gt=0)
    dilations: List[int] = Field(default_factory=lambda: [1, 2, 4])
    transformer_layers: int = Field(default=2, gt=0)
    heads: int = Field(default=4, gt=0)
    ff_dim: int = Field(default=256, gt=0)
    decoder_hidden: int = Field(default=256, gt=0)
    lambda_mask: float = Field(default=0.1, ge=0)
    beta: float = Field(default=0.25, ge=0, description="Commitment weight")
    mask_ratio: float = Field(default=0.15, ge=0, le=1)
    learning_rate: float = Field(default=1e-4, gt=0)
    batch_size: int = Field(default=128, gt=0)
    ema_decay: float = Field(default=0.99, ge=0, lt=1)
    ema_eps: float = Field(default=1e-5, gt=0)
    frequency_features: FrequencyFeatures = Field(default=FrequencyFeatures.fft)
    quantize_masked_branch: bool = Field(default=False, description="Quantize masked latents before decoding")
    train_steps: int = Field(default=2000, ge=0)
    log_every: int = Field(default=100, gt=0)
    seed: int = 0

    @field_validator("kernel_size")
    @classmethod
    def odd_kernel(cls, v):
        if v % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return v

    @model_validator(mode="after")
    def heads_divide(self):
        if self.latent_dim % self.heads:
            raise ValueError("latent_dim must be divisible by heads")
        if self.horizon < 2 and self.frequency_features == FrequencyFeatures.fft:
            raise ValueError("fft features need horizon >= 2")
        return self


class ImageLamConfig(BaseModel):
    image_size: int = Field(default=16, gt=0)
    channels: int = Field(default=3, gt=0)
    patch_size: int = Field(default=4, gt=0)
    codebook_size: int = Field(default=16, gt=0, le=256, description="K_img; token caches store ids as uint8")
    tokens_per_step: int = Field(default=4, gt=0, description="P")
    latent_dim: int = Field(default=128, gt=0)
    hidden: int = Field(default=64, gt=0)
    delta: int = Field(default=4, gt=0, description="Frame offset between start and end observation")
    beta: float = Field(default=0.25, ge=0)
    lambda_act: float = Field(default=1.0, ge=0)
    supervised_fraction: float = Field(default=0.05, ge=0, le=1)
    action_dim: int = Field(default=3, gt=0)
    action_hidden: int = Field(default=128, gt=0)
    learning_rate: float = Field(default=1e-3, gt=0)
    batch_size: int = Field(default=32, gt=0)
    train_steps: int = Field(default=1000, ge=0)
    log_every: int = Field(default=100, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def grid_fits(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        grid = self.image_size // self.patch_size
        pooled = int(round(self.tokens_per_step ** 0.5))
        if pooled * pooled != self.tokens_per_step or grid % pooled:
            raise ValueError("tokens_per_step must be a square dividing the patch grid")
        return self


# ==================== Policy Configs ====================

class BackboneConfig(BaseModel):
    layers: int = Field(default=6, ge=2, description="N_layer")
    hidden: int = Field(default=64, gt=0, description="d_hidden")
    heads: int = Field(default=4, gt=0)
    ff_dim: int = Field(default=128, gt=0)
    num_instructions: int = Field(default=8, gt=0)
    image_size: int = Field(default=16, gt=0)
    channels: int = Field(default=3, gt=0)
    patch_size: int = Field(default=4, gt=0)
    state_dim: int = Field(default=18, gt=0)
    head_hidden: int = Field(default=128, gt=0)

    @model_validator(mode="after")
    def heads_divide(self):
        if self.hidden % self.heads:
            raise ValueError("hidden must be divisible by heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


class PlaceholderLayout(BaseModel):
    strategy: StrategyName
    horizon: int = Field(..., gt=0)
    tokens_per_step: int = Field(..., gt=0)
    latent_slots: int = Field(..., ge=0)
    latent_width: int = Field(default=0, ge=0, description="Codebook width each latent slot predicts")
    action_slots: int = Field(..., ge=0)

    @property
    def total_length(self) -> int:
        return self.latent_slots + self.action_slots


class StrategyConfig(BaseModel):
    variant: StrategyName = StrategyName.baseline
    lambda_latent: Optional[float] = Field(default=None, ge=0, description="None selects the variant default")
    align_layer: Optional[int] = Field(default=None, gt=0, description="1-indexed backbone layer for la_align")


class EnvConfig(BaseModel):
    tasks: List[str] = Field(default_factory=lambda: ["reach", "pick_place", "stack_3"])
    n_demos: int = Field(default=50, gt=0)
    seed: int = 0
    image_size: int = Field(default=16, gt=0)
    max_failure_rate: float = Field(default=0.1, ge=0, le=1)


class RunConfig(BaseModel):
    strategy: StrategyName = StrategyName.baseline
    lambda_latent: Optional[float] = Field(default=None, ge=0)
    align_layer: Optional[int] = Field(default=None, gt=0)
    horizon: int = Field(default=8, gt=0)
    tokens_per_step: int = Field(default=4, gt=0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    dataset: Optional[str] = None
    data_fraction: float = Field(default=1.0, gt=0, le=1)
    train_steps: int = Field(default=5000, ge=0)
    batch_size: int = Field(default=32, gt=0)
    learning_rate: float = Field(default=1e-4, gt=0)
    lr_decay_steps: int = Field(default=2000, gt=0)
    log_every: int = Field(default=100, gt=0)
    eval_episodes: int = Field(default=10, gt=0)
    eval_workers: int = Field(default=1, gt=0)
    output_dir: str = "runs"
    action_lam_checkpoint: Optional[str] = None
    image_lam_checkpoint: Optional[str] = None
    report_wall_clock: bool = False
    env: EnvConfig = Field(default_factory=EnvConfig)
    action_lam: ActionLamConfig = Field(default_factory=ActionLamConfig)
    image_lam: ImageLamConfig = Field(default_factory=ImageLamConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)

    @field_validator("seeds")
    @classmethod
    def seeds_non_empty(cls, v):
        if not v:
            raise ValueError("seeds must not be empty")
        return v

    @model_validator(mode="after")
    def shared_sizes(self):
        if self.action_lam.horizon != self.horizon:
            raise ValueError("action_lam.horizon must equal horizon")
        if self.image_lam.tokens_per_step != self.tokens_per_step:
            raise ValueError("image_lam.tokens_per_step must equal tokens_per_step")
        return self

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(variant=self.strategy, lambda_latent=self.lambda_latent, align_layer=self.align_layer)


# ==================== Registry API Schemas ====================

class RunRecordResponse(BaseModel):
    run_id: str = Field(..., description="Unique run identifier")
    created_at: datetime
    suite: Optional[str] = None
    strategy: str
    variant_param: Optional[str] = None
    seed: int
    task: Optional[str] = None
    score: Optional[float] = Field(None, description="Rollout score in [0, 1]")
    steps: int
    wall_clock_s: Optional[float] = None
    config_hash: str
    status: RunStatus
    checkpoint_path: Optional[str] = None
    detail: Optional[Dict[str, Any]] = None

    class Config:
        from_attributes = True


class RunListResponse(BaseModel):
    total: int
    limit: int
    offset: int
    runs: List[RunRecordResponse]


class LayoutResponse(BaseModel):
    strategy: StrategyName
    horizon: int
    tokens_per_step: int
    latent_slots: int
    latent_width: int
    action_slots: int
    total_length: int
    default_lambda: float


class SuiteInfo(BaseModel):
    name: str
    strategies: List[str]
    description: str


class HealthResponse(BaseModel):
    status: str
    timestamp: datetime
    database: str
