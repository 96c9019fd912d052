"""Request/response bodies for the command service."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field

Head = Literal["ppnet", "eppnet", "protopool"]


class CommandRequest(BaseModel):
    config_path: str = Field(min_length=1,
                             description="path to the INI experiment config")
    head: Optional[Head] = None
    count: Optional[int] = Field(default=None, ge=1)
    out: Optional[str] = Field(default=None,
                               description="override the configured output dir")
    seed: Optional[int] = None
    image_ids: Optional[list[str]] = None


class CommandResponse(BaseModel):
    command: str
    summary: str
    artifacts: list[str]
    details: dict = Field(default_factory=dict)


class ErrorInfo(BaseModel):
    category: Literal["config", "missing-prerequisite", "numeric", "internal"]
    message: str


class ErrorResponse(BaseModel):
    error: ErrorInfo


class HealthResponse(BaseModel):
    status: str
    version: str
    commands: list[str]
