"""Voltage-collapse contingency screening with a conditional diffusion model."""
from .case_model import NetworkCase, apply_outage, build_ybus, load_case
from .cpf import CpfOptions, run_cpf, transfer_schedule
from .oracle import RankingTable, rank_all
from .powerflow import solve_newton

__all__ = [
    "CpfOptions",
    "NetworkCase",
    "RankingTable",
    "apply_outage",
    "build_ybus",
    "load_case",
    "rank_all",
    "run_cpf",
    "solve_newton",
    "transfer_schedule",
]
__version__ = "0.1.0"
