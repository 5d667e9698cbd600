import pytest

from edgy.filtering import ResponseFilter
from edgy.prober.sim import build_sim_network

MIXED_POLICIES = [
    {"kind": "mixed", "blocks": [[52, 0.25], [56, 0.5], [60, 0.25]]},
    {"kind": "mixed", "blocks": [[56, 0.5], [60, 0.25], [64, 0.25]]},
    {"kind": "mixed", "blocks": [[52, 0.5], [56, 0.5]]},
    {"kind": "mixed", "blocks": [[60, 0.5], [62, 0.25], [64, 0.25]]},
    {"kind": "mixed", "blocks": [[52, 0.75], [64, 0.25]]},
]


def provider(asn, core, pool, policy="uniform56", **extra):
    raw = {
        "asn": asn,
        "core_prefix": core,
        "core_depth": 3,
        "target_pool": pool,
        "delegation_policy": policy,
        "iid_style": "random",
    }
    raw.update(extra)
    return raw


def twenty_prefix_spec():
    """5 uniform /56, 5 uniform /60, 5 uniform /64 and 5 mixed /48s."""
    pool, delegation = [], {}
    policies = ["uniform56"] * 5 + ["uniform60"] * 5 + ["uniform64"] * 5 + MIXED_POLICIES
    for i, pol in enumerate(policies):
        p = f"2600:8805:{0x9200 + i:x}::/48"
        pool.append(p)
        delegation[p] = pol
    return {
        "providers": [
            provider(22773, "2600:8800::/28", pool, delegation=delegation,
                     iid_style={"kind": "eui64", "mac_pool": 50000}),
        ]
    }


def sweep_spec():
    """/48s whose round-1 counts spread across the eta grid."""
    lengths = [48, 49, 50, 51, 52, 52, 53, 54, 55, 56, 56, 57, 58, 60, 60]
    pool, delegation = [], {}
    for i, length in enumerate(lengths):
        p = f"2a02:{0x1000 + i:x}:1::/48"
        pool.append(p)
        delegation[p] = f"uniform{length}"
    pool.append("2a02:2000:1::/48")
    delegation["2a02:2000:1::/48"] = {"kind": "mixed", "blocks": [[52, 0.5], [60, 0.5]]}
    return {"providers": [provider(3320, "2a02::/16", pool, delegation=delegation)]}


def sim_filter(sim):
    return ResponseFilter(sim.alias_set(), sim.asn_table())


@pytest.fixture
def small_spec():
    return {
        "providers": [
            provider(64500, "2001:db8::/32", ["2600:8805:9200::/48", "2600:8805:9201::/48"],
                     delegation={"2600:8805:9201::/48": "uniform60"},
                     alias_prefixes=["2600:8805:9201:ff00::/56"]),
        ]
    }


@pytest.fixture
def small_sim(small_spec):
    return build_sim_network(small_spec, seed=11)


def policy_blocks(policy):
    """(length, count) pairs of a delegation policy, derived from the spec text."""
    if isinstance(policy, str):
        length = int(policy[len("uniform"):])
        return [(length, 1 << (length - 48))]
    return [(length, round(frac * (1 << (length - 48)))) for length, frac in policy["blocks"]]


def expected_unique(blocks, mask):
    """Distinct CPEs hit by one target per /mask subnet.

    A delegation no finer than /mask holds at least one target.  Finer
    delegations are hit once per /mask block they fill, since every target
    sits in the first /64 of its block.
    """
    total = 0
    for length, count in blocks:
        total += count if length <= mask else count >> (length - mask)
    return total


def expected_rounds(policy, eta1=16, eta2=256):
    """Masks a prefix is probed at, from its delegation policy alone."""
    blocks = policy_blocks(policy)
    rounds = [56]
    if expected_unique(blocks, 56) <= eta1:
        return rounds
    rounds.append(60)
    if expected_unique(blocks, 60) <= eta2:
        return rounds
    rounds.append(62)
    # a /60 yields four prefix-unique hops only if delegations of /62 or finer fill it
    if not any(length >= 62 for length, _ in blocks):
        return rounds
    rounds.append(64)
    return rounds


PROBES = {56: 256, 60: 4096, 62: 16384, 64: 65536}


class CrashingProber:
    """Forwards ``ok_batches`` batches, then fails as if the backend died."""

    def __init__(self, inner, ok_batches):
        self.inner = inner
        self.left = ok_batches

    def probe(self, batch):
        from edgy.prober.base import ProberUnavailable

        if self.left <= 0:
            raise ProberUnavailable("injected crash")
        self.left -= 1
        return self.inner.probe(batch)


# acceptance reporting: one line per criterion in the terminal summary

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    passed, _ = _CRITERIA.get(number, (True, title))
    if report.when == "call" or report.failed:
        _CRITERIA[number] = (passed and report.passed, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}")
