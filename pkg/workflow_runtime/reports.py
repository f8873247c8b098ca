"""Validation findings shared by CWDL and NIF checks."""

from __future__ import annotations

from enum import Enum

from pydantic import BaseModel, ConfigDict, Field


class Severity(str, Enum):
    ERROR = "error"
    WARNING = "warning"


class Finding(BaseModel):
    model_config = ConfigDict(frozen=True)

    severity: Severity
    path: str
    message: str


class ValidationReport(BaseModel):
    """Findings are data: an element is usable iff no error-severity finding exists."""

    findings: list[Finding] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors()

    def errors(self) -> list[Finding]:
        return [f for f in self.findings if f.severity is Severity.ERROR]

    def error(self, path: str, message: str) -> None:
        self.findings.append(Finding(severity=Severity.ERROR, path=path, message=message))

    def warning(self, path: str, message: str) -> None:
        self.findings.append(Finding(severity=Severity.WARNING, path=path, message=message))
