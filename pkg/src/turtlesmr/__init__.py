"""State machine replication from composable single-decision subprotocols.

The package is organized bottom-up: `chain` (the prefix semilattice of
command sequences), `quorum` (threshold quorum systems), `turtle_core` (the
single-decision subprotocol interface and its checkers), `onestep` and
`lowerbound` (crash-tolerant protocols), `bft` (Byzantine variants with
signed evidence), `smr` (the unbounded composition and relative chain
codec), `leader` (rotating-leader liveness wrapper), `netsim` (deterministic
discrete-event simulator), and `harness` (CLI and check pipeline).
"""

from .chain import (
    BOTTOM,
    Chain,
    ChainAgreementError,
    Command,
    agrees,
    chain_of,
    is_prefix,
    max_agreeing,
    meet,
    min_agreeing,
)
from .config import ConfigError, ScenarioConfig, load_scenario, scenario_from_dict
from .harness import check_trace, main, run_scenario, sweep
from .netsim import Trace, run
from .quorum import (
    QuorumCapacityError,
    QuorumConfigError,
    QuorumSystem,
    make_threshold,
    verify_k_intersection,
)
from .turtle_core import (
    TurtleInput,
    TurtleInvariantError,
    TurtleOutput,
    TurtleUsageError,
    check_turtle_agreement,
    check_turtle_termination,
    check_turtle_unanimity,
    check_turtle_validity,
)

__version__ = "0.1.0"
