"""Tokenwise ranking models for click-through prediction."""

from ._zenith import Model, auc, cost_report, generate_dataset, logloss, uauc

__all__ = ["Model", "auc", "cost_report", "generate_dataset", "logloss", "uauc"]
