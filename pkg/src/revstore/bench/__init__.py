"""Synthetic workloads and the measurement harness."""

from .workload import WorkloadSpec, generate_workload, load_spec

__all__ = ["WorkloadSpec", "generate_workload", "load_spec"]
