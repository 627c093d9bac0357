"""Displacement-based knowledge distillation losses and a dual-branch
few-shot class-incremental learning simulator."""

from . import cli, datagen, distill, model, numkernel, protocol, selector

__all__ = ["cli", "datagen", "distill", "model", "numkernel", "protocol", "selector"]

__version__ = "0.1.0"
