import pytest
from hypothesis import given, strategies as st

from core.errors import AllPrefixes
from core.prefixcanon import (
    Claim,
    canonical_bytes,
    is_prefix_only,
    mandatory_prefix_suspect,
    merge_split_claims,
    same_instruction,
    split_prefixes,
)
from core.x86 import Isa, LEGACY_PREFIXES


def test_split_prefixes():
    assert split_prefixes(bytes.fromhex("66f3ab"), Isa.X64) == (frozenset({0x66, 0xF3}), b"\xab")
    assert split_prefixes(bytes.fromhex("4889e5"), Isa.X64) == (frozenset(), bytes.fromhex("4889e5"))
    # REX stays with the core
    assert split_prefixes(bytes.fromhex("f348ab"), Isa.X64) == (frozenset({0xF3}), bytes.fromhex("48ab"))


def test_split_prefixes_errors():
    with pytest.raises(AllPrefixes):
        split_prefixes(bytes.fromhex("66f3"), Isa.X64)
    with pytest.raises(ValueError):
        split_prefixes(b"", Isa.X64)


def test_prefix_order_does_not_matter():
    assert same_instruction(bytes.fromhex("66f3ab"), bytes.fromhex("f366ab"), Isa.X64)
    assert not same_instruction(bytes.fromhex("66f3ab"), bytes.fromhex("f3ab"), Isa.X64)
    assert not same_instruction(bytes.fromhex("66f3ab"), bytes.fromhex("66f3aa"), Isa.X64)
    assert not same_instruction(b"", b"\x90", Isa.X64)
    assert not same_instruction(b"\x66", b"\x66\x66", Isa.X64)


def test_canonical_bytes_sorts_prefixes():
    prefixes, core = split_prefixes(bytes.fromhex("f3662eab"), Isa.X86)
    assert canonical_bytes(prefixes, core) == bytes.fromhex("2e66f3ab")


def test_is_prefix_only():
    assert is_prefix_only(b"\xf3", Isa.X64)
    assert is_prefix_only(b"\x66\xf0", Isa.X86)
    assert not is_prefix_only(b"\x48", Isa.X64)
    assert not is_prefix_only(b"", Isa.X64)


def test_mandatory_prefix_suspect():
    assert mandatory_prefix_suspect(frozenset({0xF3}), bytes.fromhex("0f10c1"))
    assert not mandatory_prefix_suspect(frozenset({0xF3}), bytes.fromhex("ab"))
    assert not mandatory_prefix_suspect(frozenset({0x2E}), bytes.fromhex("0f1f00"))


def test_merge_split_claims():
    claims = [
        Claim(0x1000, 1, b"\xf3"),
        Claim(0x1001, 2, bytes.fromhex("48ab")),
        Claim(0x1003, 1, b"\xc3"),
    ]
    merged, dangling = merge_split_claims(claims, Isa.X64)

    assert merged == [Claim(0x1000, 3, bytes.fromhex("f348ab")), Claim(0x1003, 1, b"\xc3")]
    assert dangling == []


def test_merge_chains_several_prefix_claims():
    claims = [Claim(0, 1, b"\x66"), Claim(1, 1, b"\xf3"), Claim(2, 1, b"\xab")]
    merged, dangling = merge_split_claims(claims, Isa.X64)
    assert merged == [Claim(0, 3, bytes.fromhex("66f3ab"))]
    assert dangling == []


def test_dangling_prefix_claims_are_reported_and_kept():
    claims = [
        Claim(0, 1, b"\xf3"),
        Claim(5, 1, b"\xc3"),
        Claim(6, 1, b"\x66"),
    ]
    merged, dangling = merge_split_claims(claims, Isa.X64)
    assert dangling == [Claim(0, 1, b"\xf3"), Claim(6, 1, b"\x66")]
    assert merged == claims


def test_claims_without_bytes_are_not_merged():
    claims = [Claim(0, 1, b"\xf3"), Claim(1)]
    merged, dangling = merge_split_claims(claims, Isa.X64)
    assert merged == claims
    assert dangling == [Claim(0, 1, b"\xf3")]


prefix_runs = st.lists(st.sampled_from(sorted(LEGACY_PREFIXES)), min_size=1, max_size=4, unique=True)
cores = st.binary(min_size=1, max_size=6).filter(lambda b: b[0] not in LEGACY_PREFIXES)


@given(prefixes=prefix_runs, core=cores, data=st.data())
def test_any_prefix_permutation_is_the_same_instruction(prefixes, core, data):
    shuffled = data.draw(st.permutations(prefixes))
    a = bytes(prefixes) + core
    b = bytes(shuffled) + core

    assert same_instruction(a, b, Isa.X64)
    assert split_prefixes(a, Isa.X64) == (frozenset(prefixes), core)


@given(prefixes=prefix_runs, core=cores)
def test_prefixes_split_into_separate_claims_merge_back(prefixes, core):
    claims = [Claim(i, 1, bytes([p])) for i, p in enumerate(prefixes)]
    claims.append(Claim(len(prefixes), len(core), core))

    merged, dangling = merge_split_claims(claims, Isa.X64)

    assert dangling == []
    assert merged == [Claim(0, len(prefixes) + len(core), bytes(prefixes) + core)]


@st.composite
def claim_streams(draw):
    """Sorted claims, mostly adjacent, mixing prefix-only, complete and byte-less claims."""
    fragments = st.one_of(
        st.none(),
        st.sampled_from([b"\x66", b"\xf3", b"\xf0", b"\x66\xf3", b"\x90", b"\xc3", b"\x31\xc0", b"\xab"]),
    )
    claims = []
    offset = 0
    for _ in range(draw(st.integers(min_value=0, max_value=10))):
        offset += draw(st.sampled_from([0, 0, 0, 1, 3]))
        data = draw(fragments)
        size = len(data) if data is not None else draw(st.sampled_from([None, 1, 2]))
        claims.append(Claim(offset, size, data))
        offset += size or 1
    return claims


@given(claims=claim_streams())
def test_merging_twice_changes_nothing(claims):
    once, dangling = merge_split_claims(claims, Isa.X64)
    twice, dangling_again = merge_split_claims(once, Isa.X64)

    assert twice == once
    assert dangling_again == dangling
