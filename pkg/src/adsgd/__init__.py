"""Asynchronous decentralized SGD over unreliable wireless links: simulator and analysis tools."""
from __future__ import annotations

from .analysis import BoundInputs, lemma_consensus_bound, theorem_bound, estimate_staleness_gamma, verify_lemma2_on_trace
from .compute import GradientOracle, StragglerModel, make_task
from .config import ExperimentSpec, parse_config, write_config
from .engine import ChannelConfig, RunConfig, run, run_baseline_barrier, run_baseline_sync
from .mixing import average_spectral_gap, estimate_consensus_rate, metropolis_hastings, spectral_gap
from .topology import BaseTopology, LinkFailureModel, build_base, realize_graph

__version__ = "0.1.0"
