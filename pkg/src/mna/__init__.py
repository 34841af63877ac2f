"""MPLS network actions: stack codec, ingress composer, node engine and simulator."""

from .actions import (
    ActionRegistry, AmmState, ExportRecord, MeterState, MeterVerdict, Opcode, TokenBucket,
    amm_decode, amm_encode, amm_process, default_registry, dummy_process, nffrr_process,
    nrp_process,
)
from .codec import (
    NAS_INDICATOR_BSPL, CodecError, FormatA, FormatB, FormatC, FormatD, InvariantViolation,
    LabelStack, MalformedNas, Nas, ParsedStack, RawLse, Scope, decode_stack, dissect_text,
    encode_stack, make_nas, mutable_bit_report,
)
from .composer import (
    ActionSpec, CapacityExceeded, NasRequest, NasTooLarge, NodeCapabilities, PathSpec,
    compose, compose_stack, in_between_capacity, validate_stack,
)
from .engine import (
    BackupTunnel, Disposition, DropCause, ForwardingTable, NodeState, Packet, Verdict,
    apply_frr, execute_nas, process_packet,
)
from .simulator import (
    Collector, Scenario, ScenarioInvalid, SimReport, collector_link_loss, expected_e2e_drop,
    run_scenario,
)
from .textfmt import load_scenario, parse_scenario, parse_stack_description

__version__ = "0.1.0"

__all__ = [
    "ActionRegistry", "ActionSpec", "AmmState", "BackupTunnel", "CapacityExceeded",
    "CodecError", "Collector", "Disposition", "DropCause", "ExportRecord", "FormatA",
    "FormatB", "FormatC", "FormatD", "ForwardingTable", "InvariantViolation", "LabelStack",
    "MalformedNas", "MeterState", "MeterVerdict", "NAS_INDICATOR_BSPL", "Nas", "NasRequest",
    "NasTooLarge", "NodeCapabilities", "NodeState", "Opcode", "Packet", "ParsedStack",
    "PathSpec", "RawLse", "Scenario", "ScenarioInvalid", "Scope", "SimReport", "TokenBucket",
    "Verdict", "amm_decode", "amm_encode", "amm_process", "apply_frr", "collector_link_loss",
    "compose", "compose_stack", "decode_stack", "default_registry", "dissect_text",
    "dummy_process", "encode_stack", "execute_nas", "expected_e2e_drop", "in_between_capacity",
    "load_scenario", "make_nas", "mutable_bit_report", "nffrr_process", "nrp_process",
    "parse_scenario", "parse_stack_description", "process_packet", "run_scenario",
    "validate_stack",
]
