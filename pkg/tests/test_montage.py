import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainstack.montage import (
    REGIONS, IncompletePartitionError, MontageError, OverlapError, RegionPartition, UnknownChannelError,
    format_montage, load_default, parse_montage, partition_by_prefix, slice_region, validate_partition,
)

SEVEN = "channels: a b c d e f g\n" + "".join(f"region {r}: {n}\n" for r, n in zip(REGIONS, "abcdefg"))


def test_desk_montage_sizes(desk16):
    montage, partition = desk16
    assert montage.C == 16
    assert partition.sizes() == [2, 3, 3, 2, 2, 2, 2]
    assert validate_partition(partition, 16) == []


def test_overlap_error():
    text = SEVEN.replace("region Parietal: f", "region Parietal: f c")
    with pytest.raises(OverlapError):
        parse_montage(text)


def test_unknown_channel_error():
    with pytest.raises(UnknownChannelError):
        parse_montage(SEVEN.replace("region Occipital: g", "region Occipital: g Oz"))


def test_missing_region_error():
    text = "\n".join(line for line in SEVEN.splitlines() if not line.startswith("region Central"))
    with pytest.raises(IncompletePartitionError):
        parse_montage(text)


def test_seven_singletons_cover_all_channels():
    montage, partition = parse_montage(SEVEN)
    assert partition.union() == set(range(montage.C)) == set(range(7))


def test_comments_and_unlisted_channels():
    text = "# header\nchannels: a b c d e f g EXG1  # trailing\n" + SEVEN.split("\n", 1)[1]
    montage, partition = parse_montage(text)
    assert montage.C == 8 and 7 not in partition.union()


def test_malformed_lines():
    with pytest.raises(MontageError):
        parse_montage("no colon here\n")
    with pytest.raises(MontageError):
        parse_montage(SEVEN + "region Nowhere: a\n")


def test_parse_idempotent_on_serialized_output(desk16):
    again = parse_montage(format_montage(*desk16))
    assert again == desk16
    assert format_montage(*again) == format_montage(*desk16)


def test_tenten64_prefix_grouping():
    montage, partition = load_default("tenten64")
    assert montage.C == 64
    assert validate_partition(partition, 64) == []
    assert (montage, partition) == partition_by_prefix(montage.channel_names)
    names = montage.channel_names
    assert {names[i] for i in partition["LeftTemporal"]} <= {"T7", "TP7", "FT7"}


def test_slice_rows(rng):
    x = rng.standard_normal((8, 4))
    part = RegionPartition({r: ((i,) if r != "Occipital" else (6, 7)) for i, r in enumerate(REGIONS)})
    np.testing.assert_array_equal(slice_region(x, part, "Occipital"), x[[6, 7]])
    assert slice_region(x, part, "Frontal").shape == (1, 4)


def test_slice_all_regions_cover_union(desk16, rng):
    montage, partition = desk16
    x = rng.standard_normal((16, 5))
    rows = np.concatenate([slice_region(x, partition, r) for r in REGIONS])
    idx = np.concatenate([partition[r] for r in REGIONS])
    np.testing.assert_array_equal(rows, x[idx])
    assert set(idx) == partition.union()


def test_slice_out_of_range(desk16):
    with pytest.raises(IndexError):
        slice_region(np.zeros((8, 4)), desk16[1], "Occipital")


def test_validate_reports_violations(desk16):
    regions = dict(desk16[1].regions)
    regions["Occipital"] = (14, 99)
    regions["Frontal"] = ()
    problems = validate_partition(regions, 16)
    assert any("99" in p and "out of range" in p for p in problems)
    assert any("empty region Frontal" in p for p in problems)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(12))), st.integers(1, 5))
def test_partition_disjointness_property(order, extra):
    names = [f"ch{i}" for i in range(12)]
    # seven nonempty disjoint groups cut from a shuffled channel list
    cuts = [order[i:i + 1] for i in range(7)]
    cuts[-1] = cuts[-1] + order[7:7 + extra]
    text = "channels: " + " ".join(names) + "\n"
    text += "".join(f"region {r}: {' '.join(names[i] for i in c)}\n" for r, c in zip(REGIONS, cuts))
    montage, partition = parse_montage(text)
    assert sum(partition.sizes()) == len(partition.union())
    for r in REGIONS:
        assert slice_region(np.zeros((12, 3)), partition, r).shape == (len(partition[r]), 3)
