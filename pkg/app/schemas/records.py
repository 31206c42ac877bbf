from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

ROUNDS_CSV_HEADER = ["round", "algorithm", "accuracy", "mean_sup_loss", "mean_con_loss", "participants"]


class RoundRecord(BaseModel):
    round: int = Field(..., ge=1, description="Number of completed rounds")
    algorithm: str
    participants: List[int]
    accuracy: float = Field(..., ge=0, le=1, description="Global top-1 test accuracy")
    mean_sup_loss: float
    mean_con_loss: Optional[float] = None
    wall_time: float = Field(default=0.0, ge=0, description="Seconds spent in the round")
    accuracy_std: Optional[float] = Field(default=None, description="Across-party std (SOLO only)")

    def csv_row(self) -> List[str]:
        return [
            str(self.round),
            self.algorithm,
            f"{self.accuracy:.6f}",
            f"{self.mean_sup_loss:.6f}",
            "" if self.mean_con_loss is None else f"{self.mean_con_loss:.6f}",
            ";".join(str(p) for p in self.participants),
        ]


class Curve(BaseModel):
    """Accuracy per round of one algorithm run."""

    name: str = ""
    points: List[Tuple[int, float]]

    @model_validator(mode="after")
    def validate_points(self):
        rounds = [r for r, _ in self.points]
        if any(b <= a for a, b in zip(rounds, rounds[1:])):
            raise ValueError("curve rounds must be strictly increasing")
        if any(not 0.0 <= acc <= 1.0 for _, acc in self.points):
            raise ValueError("curve accuracies must lie in [0, 1]")
        return self

    @property
    def final_round(self) -> int:
        return self.points[-1][0]

    @property
    def final_accuracy(self) -> float:
        return self.points[-1][1]
