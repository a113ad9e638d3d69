"""Request/response models for the experiment service.

Clients send the config file's text, not a path: the service parses and
validates it server-side, and all artifacts live under the config's root on
the server's filesystem.
"""
from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class GenerateRequest(BaseModel):
    config_text: str


class FinetuneRequest(BaseModel):
    config_text: str
    seed: Optional[int] = Field(default=None, description="restrict to one replicate seed")
    init: bool = Field(default=False, description="create the base model checkpoint if absent")


class EvaluateRequest(BaseModel):
    config_text: str
    seed: Optional[int] = None


class ReportRequest(BaseModel):
    config_text: str


class CommandResponse(BaseModel):
    status: Literal["ok"]
    detail: str
    artifacts: list[str]


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str
