from typing import List, Dict, Any, Optional, Literal
from enum import Enum
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Algorithm Mode Enum
class AlgoMode(str, Enum):
    """The six experiment arms"""
    FED_SGD = "fed_sgd"
    GEOMETRIC = "geometric"
    FED_CURV = "fed_curv"
    FISHR_INTER_GEO = "fishr_inter_geo"
    FISHR_INTRA_ARITH = "fishr_intra_arith"
    FISHR_INTRA_GEO = "fishr_intra_geo"

    @property
    def uses_fishr(self) -> bool:
        """Whether clients add the Fishr penalty gradient"""
        return self not in (AlgoMode.FED_SGD, AlgoMode.GEOMETRIC)

    @property
    def geometric_server(self) -> bool:
        """Whether the server combines client gradients with the weighted geometric mean"""
        return self in (AlgoMode.GEOMETRIC, AlgoMode.FISHR_INTER_GEO)

    @property
    def intra_silo(self) -> bool:
        """Whether clients aggregate chunk gradients before uploading"""
        return self in (AlgoMode.FISHR_INTRA_ARITH, AlgoMode.FISHR_INTRA_GEO)


class OptimizerKind(str, Enum):
    """Server-side optimizer"""
    ADAM = "adam"
    SGD = "sgd"


class DatasetKind(str, Enum):
    """Benchmarks the runner knows how to build"""
    COLOR_DIGITS = "color_digits"
    ROTATED = "rotated"
    SYNTH_SPURIOUS = "synth_spurious"
    SYNTH_CLINICAL = "synth_clinical"
    CLINICAL_CSV = "clinical_csv"


# Model Models
class ModelSpec(BaseModel):
    """Feed-forward MLP description"""
    layer_sizes: List[int] = Field(..., min_length=2)
    activation: Literal["relu"] = "relu"
    head: Literal["sigmoid_bce", "softmax_ce"] = "sigmoid_bce"

    @field_validator("layer_sizes")
    @classmethod
    def _positive_sizes(cls, sizes: List[int]) -> List[int]:
        if any(size < 1 for size in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        return sizes

    @model_validator(mode="after")
    def _head_matches_output(self) -> "ModelSpec":
        binary_output = self.layer_sizes[-1] == 1
        if binary_output != (self.head == "sigmoid_bce"):
            raise ValueError(
                f"output size {self.layer_sizes[-1]} does not fit head {self.head}"
            )
        return self

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    @property
    def penultimate_size(self) -> int:
        return self.layer_sizes[-2]

    @property
    def head_param_count(self) -> int:
        """Weights plus bias of the final linear classifier"""
        return self.output_size * self.penultimate_size + self.output_size

    @property
    def param_count(self) -> int:
        return sum(
            fan_in * fan_out + fan_out
            for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:])
        )


class RoundConfig(BaseModel):
    """Per-run federated training settings"""
    model_config = ConfigDict(populate_by_name=True)

    mode: AlgoMode = AlgoMode.FED_SGD
    lr: float = Field(3e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    fishr_lambda: float = Field(0.0, ge=0, alias="lambda")
    rounds: int = Field(500, ge=1)
    batch_size: int = Field(64, ge=1)
    geo_chunk: int = Field(8, ge=1)
    seed: int = Field(0, ge=0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)

    @property
    def penalty_active(self) -> bool:
        """Fishr penalty is computed only for Fishr modes with a positive coefficient"""
        return self.mode.uses_fishr and self.fishr_lambda > 0


class ExperimentConfig(BaseModel):
    """Everything the runner needs for one experiment"""
    model_config = ConfigDict(populate_by_name=True)

    dataset: DatasetKind = DatasetKind.SYNTH_SPURIOUS
    mode: AlgoMode = AlgoMode.FED_SGD
    rounds: int = Field(200, ge=1)
    batch_size: int = Field(64, ge=1)
    geo_chunk: int = Field(8, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    fishr_lambda: float = Field(0.0, ge=0, alias="lambda")
    optimizer: OptimizerKind = OptimizerKind.ADAM
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    model: Optional[ModelSpec] = None
    output_dir: str = "results"

    # Dataset shape
    flip_probs: List[float] = Field(default_factory=lambda: [0.15, 0.30, 0.45, 0.60, 0.75])
    ood_flip: float = Field(0.90, ge=0, le=1)
    ood_label_flip: float = Field(0.15, ge=0, le=1)
    n_per_silo: int = Field(1000, ge=2)
    n_ood: int = Field(2000, ge=1)
    d_inv: int = Field(10, ge=1)
    silo_degrees: List[List[float]] = Field(
        default_factory=lambda: [[10, 25, 40], [60, 75, 90], [-10, -40, -90]]
    )
    ood_range: List[float] = Field(default_factory=lambda: [-90.0, 90.0])
    n_hospitals: int = Field(58, ge=21)
    n_patients: int = Field(30760, ge=21)
    n_features: int = Field(1399, ge=1)
    positive_rate: float = Field(0.305, gt=0, lt=1)
    val_fraction: float = Field(0.3, gt=0, lt=1)

    # Data paths
    mnist_images: Optional[str] = None
    mnist_labels: Optional[str] = None
    cifar_batches: List[str] = Field(default_factory=list)
    clinical_csv: Optional[str] = None

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, seeds: List[int]) -> List[int]:
        if len(set(seeds)) != len(seeds):
            raise ValueError(f"seeds must be unique, got {seeds}")
        if any(seed < 0 for seed in seeds):
            raise ValueError("seeds must be non-negative")
        return seeds

    @field_validator("flip_probs")
    @classmethod
    def _probabilities(cls, probs: List[float]) -> List[float]:
        if not probs or any(not 0.0 <= p <= 1.0 for p in probs):
            raise ValueError(f"flip probabilities must lie in [0, 1], got {probs}")
        return probs

    @field_validator("ood_range")
    @classmethod
    def _ordered_range(cls, bounds: List[float]) -> List[float]:
        if len(bounds) != 2 or bounds[0] > bounds[1]:
            raise ValueError(f"ood_range must be [lo, hi] with lo <= hi, got {bounds}")
        return bounds

    def round_config(self, seed: int) -> RoundConfig:
        """Round settings for one seed of this experiment"""
        return RoundConfig(
            mode=self.mode,
            lr=self.lr,
            weight_decay=self.weight_decay,
            fishr_lambda=self.fishr_lambda,
            rounds=self.rounds,
            batch_size=self.batch_size,
            geo_chunk=self.geo_chunk,
            seed=seed,
            optimizer=self.optimizer,
        )


# Evaluation Models
class RoundRecord(BaseModel):
    """One row of the per-round log"""
    round: int
    train_loss: float
    val_loss: float
    ood_loss: float
    ood_acc: float
    ood_auroc: Optional[float] = None
    ood_auprc: Optional[float] = None
    fishr_loss: float = 0.0


class EvalReport(BaseModel):
    """Evaluation of the global model at one round"""
    loss: float
    accuracy: float = Field(..., ge=0, le=1)
    auroc: Optional[float] = Field(None, ge=0, le=1)
    auprc: Optional[float] = Field(None, ge=0, le=1)
    per_silo_accuracy: List[float] = Field(default_factory=list)
    per_subenv_accuracy: Dict[str, float] = Field(default_factory=dict)


class RoundLog(BaseModel):
    """Full history of one federated run"""
    records: List[RoundRecord] = Field(default_factory=list)
    best_round: int = 0
    best_report: Optional[EvalReport] = None


class MetricSummary(BaseModel):
    """mean±std of one metric over seeds"""
    mean: Optional[float] = None
    std: Optional[float] = None
    formatted: str = ""


class SummaryReport(BaseModel):
    """Seed-aggregated results at the min-OOD-loss round"""
    dataset: DatasetKind
    mode: AlgoMode
    fishr_lambda: float
    seeds: List[int]
    rounds: int
    best_rounds: List[int]
    ood_loss: MetricSummary
    ood_acc: MetricSummary
    ood_auroc: MetricSummary
    ood_auprc: MetricSummary
    fairness_variance: MetricSummary
    fairness_kl: MetricSummary
    accuracy_entropy: MetricSummary
    subenv_fairness_variance: Optional[MetricSummary] = None
    subenv_fairness_kl: Optional[MetricSummary] = None


class SweepRow(BaseModel):
    """One row of the lambda sweep"""
    fishr_lambda: float
    ood_loss_mean: Optional[float]
    ood_loss_std: Optional[float]
    formatted: str


# Wire Models
class RegisterRequest(BaseModel):
    """Body of POST /register"""
    silo_index: Optional[int] = Field(None, ge=0)


class RegisterResponse(BaseModel):
    """Reply to POST /register"""
    client_id: int
    config: RoundConfig
    model: ModelSpec


class RoundTicket(BaseModel):
    """Reply to GET /round: what a client needs to compute its update"""
    model_config = ConfigDict(populate_by_name=True)

    round: int
    status: Literal["waiting", "open", "done"]
    mode: AlgoMode
    fishr_lambda: float = Field(..., alias="lambda")
    w: List[float] = Field(default_factory=list)
    v_bar_prev: List[float] = Field(default_factory=list)


class UpdatePayload(BaseModel):
    """Body of POST /update"""
    client_id: int = Field(..., ge=0)
    round: int = Field(..., ge=0)
    grad: List[float] = Field(..., min_length=1)
    var_diag: List[float] = Field(..., min_length=1)
    n: int = Field(..., ge=1)


class Ack(BaseModel):
    """Reply to a successful POST /update"""
    ack: bool = True
    round: int
    round_closed: bool = False


class ErrorResponse(BaseModel):
    """Model for standardized error responses"""
    error_type: str
    message: str
    details: Dict[str, Any] = Field(default_factory=dict)
