"""bmsim: deterministic simulator for a blockchain-hosted membership service.

A BFT cluster reconfigures itself locally and publishes its membership to a
registry contract on a simulated ledger; clients bootstrap their view of the
cluster from the contract, which defeats "I still work here" style attacks by
retired-and-later-corrupted configurations.
"""

from bmsim.membership import (
    Configuration,
    max_faults,
    vote_threshold,
    overlap_ok,
    max_batch_threshold,
    max_correct_leavers,
    symmetric_difference,
    policy_threshold,
)

__version__ = "0.1.0"

__all__ = [
    "Configuration",
    "max_faults",
    "vote_threshold",
    "overlap_ok",
    "max_batch_threshold",
    "max_correct_leavers",
    "symmetric_difference",
    "policy_threshold",
    "__version__",
]
