from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Activation = Literal["relu", "none"]
Variant = Literal["fedavg", "moon", "fedprox", "scaffold", "solo"]


class NetworkArch(BaseModel):
    """Architecture descriptor: base encoder -> projection head -> output layer."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_dim: int = Field(..., gt=0, description="Feature dimension d of the inputs")
    encoder_widths: Tuple[int, ...] = Field(default=(32, 32), min_length=1, description="Widths of the ReLU encoder layers")
    projection_dim: int = Field(default=16, gt=0, description="Output length of the projection head")
    projection_hidden: Optional[int] = Field(default=None, gt=0, description="Hidden width of the projection head (defaults to projection_dim)")
    num_classes: int = Field(..., gt=0, description="Number of output classes C")
    use_projection_head: bool = Field(default=True, description="When false, R_w(x) is the encoder output")

    @field_validator("encoder_widths")
    @classmethod
    def validate_widths(cls, v):
        if any(w <= 0 for w in v):
            raise ValueError("encoder widths must be positive")
        return tuple(v)

    @property
    def representation_dim(self) -> int:
        return self.projection_dim if self.use_projection_head else self.encoder_widths[-1]

    def layer_specs(self) -> List[Tuple[str, int, int, Activation]]:
        """(stage, out, in, activation) for every dense layer in canonical order."""
        specs: List[Tuple[str, int, int, Activation]] = []
        fan_in = self.input_dim
        for width in self.encoder_widths:
            specs.append(("encoder", width, fan_in, "relu"))
            fan_in = width
        if self.use_projection_head:
            hidden = self.projection_hidden or self.projection_dim
            specs.append(("projection", hidden, fan_in, "relu"))
            specs.append(("projection", self.projection_dim, hidden, "none"))
            fan_in = self.projection_dim
        specs.append(("output", self.num_classes, fan_in, "none"))
        return specs

    def parameter_count(self) -> int:
        return sum(out * fan_in + out for _, out, fan_in, _ in self.layer_specs())


class ContrastiveConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    temperature: float = Field(default=0.5, gt=0, description="Temperature tau of the model-contrastive loss")
    mu: float = Field(default=1.0, ge=0, description="Weight of the regularising term")
    max_negative_pairs: int = Field(default=1, ge=1, description="Maximum number of previous local models used as negatives")


class PartitionSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_parties: int = Field(default=10, ge=1, description="Number of parties N")
    beta: float = Field(default=0.5, gt=0, description="Dirichlet concentration parameter")
    seed: int = Field(default=0, description="Partition seed")
    mode: Literal["dirichlet", "iid"] = Field(default="dirichlet")


class AlgorithmConfig(BaseModel):
    """Hyper-parameters of one federated run."""

    model_config = ConfigDict(frozen=True)

    variant: Variant = Field(default="moon")
    mu: float = Field(default=1.0, ge=0, description="MOON / FedProx regularisation weight")
    temperature: float = Field(default=0.5, gt=0, description="MOON temperature tau")
    local_epochs: int = Field(default=10, ge=1, description="Local epochs E per round")
    rounds: int = Field(default=100, ge=1, description="Communication rounds T")
    learning_rate: float = Field(default=0.01, ge=0, description="Local SGD learning rate eta")
    momentum: float = Field(default=0.9, ge=0, description="Local SGD momentum")
    weight_decay: float = Field(default=1e-5, ge=0, description="Local SGD weight decay")
    batch_size: int = Field(default=64, ge=1)
    sample_fraction: float = Field(default=1.0, gt=0, le=1, description="Fraction of parties sampled per round")
    server_momentum: float = Field(default=0.0, ge=0, lt=1, description="FedAvgM server momentum (0 disables)")
    max_negative_pairs: int = Field(default=1, ge=1, description="MOON maximum number of negative pairs k")
    loss_variant: Literal["contrastive", "l2"] = Field(default="contrastive", description="MOON regulariser")
    scaffold_corrections: bool = Field(default=True, description="When false SCAFFOLD keeps c and c_i frozen at zero")
    solo_epochs: Optional[int] = Field(default=None, ge=1, description="SOLO epochs per round (defaults to local_epochs)")
    master_seed: int = Field(default=0)

    @model_validator(mode="after")
    def validate_learning_rate(self):
        if self.variant == "scaffold" and self.scaffold_corrections and self.learning_rate == 0:
            raise ValueError("SCAFFOLD control variates need a positive learning_rate")
        return self

    @property
    def label(self) -> str:
        if self.server_momentum > 0 and self.variant != "solo":
            return f"{self.variant}+fedavgm"
        return self.variant

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(
            temperature=self.temperature, mu=self.mu, max_negative_pairs=self.max_negative_pairs
        )


class ExperimentConfig(BaseModel):
    """Flat experiment document; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # dataset
    dataset: Literal["blobs", "csv"] = "blobs"
    blobs_num_classes: int = Field(default=3, gt=0)
    blobs_samples_per_class: int = Field(default=600, gt=0)
    blobs_dim: int = Field(default=8, gt=0)
    blobs_spread: float = Field(default=1.0, gt=0)
    blobs_seed: int = 0
    test_fraction: float = Field(default=0.2, gt=0, lt=1, description="Held-out share of generated blobs")
    train_csv: Optional[Path] = None
    test_csv: Optional[Path] = None

    # partition
    num_parties: int = Field(default=10, ge=1)
    partition: Literal["dirichlet", "iid"] = "dirichlet"
    beta: float = Field(default=0.5, gt=0)
    partition_seed: int = 0

    # algorithm
    algorithm: Variant = "moon"
    mu: float = Field(default=1.0, ge=0)
    temperature: float = Field(default=0.5, gt=0)
    local_epochs: int = Field(default=10, ge=1)
    rounds: int = Field(default=100, ge=1)
    learning_rate: float = Field(default=0.01, ge=0)
    momentum: float = Field(default=0.9, ge=0)
    weight_decay: float = Field(default=1e-5, ge=0)
    batch_size: int = Field(default=64, ge=1)
    sample_fraction: float = Field(default=1.0, gt=0, le=1)
    server_momentum: float = Field(default=0.0, ge=0, lt=1)
    max_negative_pairs: int = Field(default=1, ge=1)
    loss_variant: Literal["contrastive", "l2"] = "contrastive"
    scaffold_corrections: bool = True
    solo_epochs: Optional[int] = Field(default=None, ge=1)
    master_seed: int = 0

    # network
    encoder_widths: Tuple[int, ...] = (32, 32)
    projection_dim: int = Field(default=16, gt=0)
    use_projection_head: bool = True

    # reporting
    eval_every: int = Field(default=1, ge=1, description="Evaluate the global model every r rounds")
    output_dir: Path = Path("runs/latest")

    @model_validator(mode="after")
    def validate_paths(self):
        if self.dataset == "csv":
            for key in ("train_csv", "test_csv"):
                path = getattr(self, key)
                if path is None:
                    raise ValueError(f"{key} is required when dataset is 'csv'")
                if not Path(path).is_file():
                    raise ValueError(f"{key} does not exist: {path}")
        return self

    @model_validator(mode="after")
    def validate_learning_rate(self):
        if self.algorithm == "scaffold" and self.scaffold_corrections and self.learning_rate == 0:
            raise ValueError("SCAFFOLD control variates need a positive learning_rate")
        return self

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(
            num_parties=self.num_parties, beta=self.beta, seed=self.partition_seed, mode=self.partition
        )

    def algorithm_config(self) -> AlgorithmConfig:
        return AlgorithmConfig(
            variant=self.algorithm,
            mu=self.mu,
            temperature=self.temperature,
            local_epochs=self.local_epochs,
            rounds=self.rounds,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            sample_fraction=self.sample_fraction,
            server_momentum=self.server_momentum,
            max_negative_pairs=self.max_negative_pairs,
            loss_variant=self.loss_variant,
            scaffold_corrections=self.scaffold_corrections,
            solo_epochs=self.solo_epochs,
            master_seed=self.master_seed,
        )

    def network_arch(self, input_dim: int, num_classes: int) -> NetworkArch:
        return NetworkArch(
            input_dim=input_dim,
            encoder_widths=self.encoder_widths,
            projection_dim=self.projection_dim,
            num_classes=num_classes,
            use_projection_head=self.use_projection_head,
        )
