"""Workflow runtime: CWDL, NIF, broker, controllers and the execution engine."""
