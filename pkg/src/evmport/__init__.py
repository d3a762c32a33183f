"""Move EVM contracts, with their storage, from one chain to another."""

from .codegen import generate_deploy_code, generate_proxy_set
from .encoding import keccak256, rlp_decode, rlp_encode
from .evm import DEFAULT_SCHEDULE, GasSchedule
from .migrate import plan_migration, execute_migration, verify_migration
from .reconstruct import replay_journal
from .snapshot import StateSnapshot
from .trie import secure_storage_root, trie_root

__version__ = "0.1.0"
