"""
実行設定
Simulation settings, evaluation grids, output paths and the JSON run config.
"""
import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .coefficients import CoefficientField
from .logger import run_logger


class Scheme(str, Enum):
    SYMMETRIZED = "symmetrized"
    PROJECTED = "projected"


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    dt: float = Field(default=1e-4, gt=0, description="time step")
    horizon: float = Field(default=2.0, gt=0)
    burn_in: float = Field(default=0.0, ge=0)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    path_count: int = Field(default=1, gt=0)
    explosion_bound: float = Field(default=1e6, gt=0)
    scheme: Scheme = Scheme.SYMMETRIZED
    x0: Optional[float] = Field(default=None, description="start state; None = stationary start")

    @model_validator(mode="after")
    def _check_times(self):
        if not self.burn_in < self.horizon:
            raise ValueError(f"burn_in ({self.burn_in}) must be smaller than horizon ({self.horizon})")
        if not self.dt < self.horizon:
            raise ValueError(f"dt ({self.dt}) must be smaller than horizon ({self.horizon})")
        return self

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))

    def step_index(self, t: float) -> int:
        return min(self.n_steps, max(0, int(round(t / self.dt))))


class GridSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    min: float
    max: float
    count: int = Field(ge=2)

    @model_validator(mode="after")
    def _check_order(self):
        if not self.max > self.min:
            raise ValueError(f"grid max ({self.max}) must exceed min ({self.min})")
        return self

    @classmethod
    def parse(cls, text: str) -> "GridSpec":
        """'min:max:count' 形式"""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"grid must look like min:max:count, got {text!r}")
        return cls(min=float(parts[0]), max=float(parts[1]), count=int(parts[2]))

    def points(self) -> np.ndarray:
        return np.linspace(self.min, self.max, self.count)


class OutputSpec(BaseModel):
    report: Optional[str] = None
    csv: Optional[str] = None
    hist: Optional[str] = None
    trajectory: Optional[str] = None

    def unwritable(self) -> List[str]:
        """書き込めない出力先ディレクトリ"""
        problems = []
        for path in (self.report, self.csv, self.hist, self.trajectory):
            if path is None:
                continue
            parent = Path(path).resolve().parent
            if not parent.is_dir() or not os.access(parent, os.W_OK):
                problems.append(str(parent))
        return problems


class RunConfig(BaseModel):
    field: CoefficientField
    sim: SimConfig = Field(default_factory=SimConfig)
    grid: Optional[GridSpec] = None
    outputs: OutputSpec = Field(default_factory=OutputSpec)

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "RunConfig":
        # CoefficientField 単体の JSON も受け付ける
        if isinstance(payload, dict) and "domain" in payload and "field" not in payload:
            return cls(field=payload)
        return cls.model_validate(payload)


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """JSON 設定を読み込む (json.JSONDecodeError / pydantic.ValidationError を送出)"""
    text = Path(path).read_text(encoding="utf-8")
    return RunConfig.from_payload(json.loads(text))


def get_worker_count() -> int:
    """環境変数 REFDIFF_THREADS からワーカー数を取得する"""
    default = os.cpu_count() or 1
    value = os.getenv("REFDIFF_THREADS", "")
    if not value:
        return default
    try:
        count = int(value)
    except ValueError:
        run_logger.log_app("warning", f"ignoring REFDIFF_THREADS={value!r}: not an integer")
        return default
    if count < 1:
        run_logger.log_app("warning", f"ignoring REFDIFF_THREADS={value!r}: must be positive")
        return default
    return count
