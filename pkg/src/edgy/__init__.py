"""Discovery of IPv6 periphery (last-hop) routers by multi-round subnet probing."""

__version__ = "0.1.0"

from .netcore import (
    AsnTable,
    Prefix,
    asn_lookup,
    eui64_to_mac,
    format_address,
    mac_to_eui64,
    matching_msb,
    parse_address,
    parse_prefix,
    subnet_id,
)
from .seed import CandidateSet, SeedTrace, Trace, TraceResult, discover_init, parse_seed_file
from .filtering import AliasSet, ResponseVerdict, classify_response, load_alias_file
from .campaign import (
    CampaignConfig,
    CampaignState,
    Decision,
    LastHopRecord,
    evaluate_round,
    generate_round_targets,
    run_campaign,
)
from .prober import ProbeBatch, SimNetwork, build_sim_network
from .analysis import detect_boundary, edginess, emit_report, eta_sweep, eui64_stats, iid_entropy
