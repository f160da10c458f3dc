from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class ExplorationConfig(BaseModel):
    """Off-policy perturbation of the tree sampler during E-steps.

    ``epsilon`` decays linearly to ``epsilon_final`` over the run. ``top_k``
    restricts each draw to the k highest-logit tokens.
    """

    model_config = ConfigDict(extra="forbid")

    epsilon: float = Field(default=0.05, ge=0, le=1)
    epsilon_final: float = Field(default=0.0, ge=0, le=1)
    temperature: float = Field(default=1.0, gt=0)
    top_k: Optional[int] = Field(default=None, ge=1)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=10, ge=0)
    batch_size: int = Field(default=8, ge=1)
    # Learning rates of 0 freeze the corresponding parameters.
    lr_policy: float = Field(default=5e-4, ge=0)
    lr_logic: float = Field(default=1e-3, ge=0)
    alpha: float = Field(default=0.5, gt=0)
    alternate_every: int = Field(default=1, ge=1)
    d: int = Field(default=3, ge=1)
    W: int = Field(default=3, ge=1)
    ema_beta: float = Field(default=0.9, ge=0, lt=1)
    exploration: ExplorationConfig = Field(default_factory=ExplorationConfig)
    seed: int = 0
    m_step_samples: int = Field(default=4, ge=1)
    # Initial logit of stopping under the prior; larger keeps early trees small.
    init_stop_bias: float = 2.0
    # "remote" scores p(R) with the language-model endpoint in $LOGIC_LM_ENDPOINT;
    # phi is then frozen and only w is fitted in the M-step.
    prior: Literal["learned", "remote"] = "learned"

    optimizer: Literal["rmsprop", "sgd"] = "rmsprop"
    rms_decay: float = Field(default=0.99, ge=0, lt=1)
    # Both learning rates ramp up linearly over this many updates.
    warmup_steps: int = Field(default=0, ge=0)
    logic_optimizer: Literal["rmsprop", "sgd"] = "rmsprop"
    # Gradient iterations on (w, phi) per sampled M-step batch.
    logic_update_steps: int = Field(default=1, ge=1)
    logic_grad_clip: Optional[float] = Field(default=10.0, gt=0)
    logic_weight_clip: float = Field(default=10.0, gt=0)
    eval_samples: int = Field(default=8, ge=1)
    count_transform: Literal["identity", "log1p"] = "identity"
    allow_self_loops: bool = False
    reward_floor: float = -1e6
    enumeration_cap: int = Field(default=10**6, ge=1)
    threads: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_exploration(self) -> "TrainConfig":
        if self.exploration.epsilon_final > self.exploration.epsilon:
            raise ValueError("exploration.epsilon_final must not exceed exploration.epsilon")
        return self
