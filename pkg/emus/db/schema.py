from sqlmodel import SQLModel, Field, Relationship
from typing import Optional, List
from datetime import datetime
import json


class ExperimentRun(SQLModel, table=True):
    __tablename__ = "experiment_run"

    id: Optional[int] = Field(default=None, primary_key=True)
    name: str = Field(index=True)
    kind: str = Field(index=True)  # tail, lowtemp, mixture, custom
    command: str = Field(default="run")  # run, compare-direct
    config_json: str = Field(default="{}")
    output_dir: str
    status: str = Field(default="running")  # running, completed, failed
    started_at: datetime = Field(default_factory=datetime.utcnow)
    finished_at: Optional[datetime] = None
    error_message: Optional[str] = None

    # Relationships
    replicates: List["ReplicateSummary"] = Relationship(back_populates="run")

    @property
    def config(self) -> dict:
        return json.loads(self.config_json)

    @config.setter
    def config(self, value: dict):
        self.config_json = json.dumps(value)


class ReplicateSummary(SQLModel, table=True):
    __tablename__ = "replicate_summary"

    id: Optional[int] = Field(default=None, primary_key=True)
    run_id: int = Field(foreign_key="experiment_run.id", index=True)
    replicate: int = Field(ge=0)
    seed: int
    estimate: Optional[float] = None
    std_error: Optional[float] = None
    relative_error: Optional[float] = None
    summary_json: str = Field(default="{}")
    created_at: datetime = Field(default_factory=datetime.utcnow)

    # Relationships
    run: Optional["ExperimentRun"] = Relationship(back_populates="replicates")

    @property
    def summary(self) -> dict:
        return json.loads(self.summary_json)
