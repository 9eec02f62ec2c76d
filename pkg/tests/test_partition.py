import pytest

from oosdetect.errors import NotASeparator, PartitionMismatch, UnknownBus
from oosdetect.partition import check_separator, make_partition, require_same_partition

REST = [30, 31, 32, 33, 34, 35, 36, 37, 38]


def test_c1_isolates_generator_39(ieee39):
    part, cut = make_partition(ieee39, REST, ["1-2", "8-9"], "C1")
    assert part.A == {39}
    assert check_separator(ieee39, part, cut)
    assert {b for b, s in part.bus_side.items() if s == "A"} == {1, 9, 39}
    assert part.M_S > 0 and part.M_A > 0


def test_cutset_orientation_is_s_to_a(ieee39):
    # 16-17 is stored 16->17 with 16 on the leading side, 15-16 is stored with 16 at its "to" end
    part, cut = make_partition(ieee39, [33, 34, 35, 36], ["16-17", "15-16"], "C4")
    assert cut.forward == (True, False)


def test_literal_c3_is_not_a_separator(ieee39):
    with pytest.raises(NotASeparator):
        make_partition(ieee39, REST, ["1-39", "17-18", "4-14", "5-6", "6-7"], "C3")


def test_completed_c3_separates(ieee39):
    part, cut = make_partition(ieee39, REST, ["1-39", "2-3", "17-18", "4-14", "5-6", "6-7"], "C3")
    assert part.A == {39}
    assert check_separator(ieee39, part, cut)


@pytest.mark.parametrize("leading, lines, err", [
    ([31], ["1-2", "8-9"], NotASeparator),           # wrong grouping for the cut
    ([99], ["1-2"], UnknownBus),
    (REST + [39], ["1-2"], NotASeparator),           # empty lagging side
    (REST, ["1-2", "1-2"], NotASeparator),
])
def test_partition_errors(ieee39, leading, lines, err):
    with pytest.raises(err):
        make_partition(ieee39, leading, lines)


def test_line_not_crossing_rejected(ieee39):
    with pytest.raises(NotASeparator):
        make_partition(ieee39, REST, ["1-2", "8-9", "16-17"])


def test_require_same_partition(ieee39):
    p1, _ = make_partition(ieee39, REST, ["1-2", "8-9"])
    p2, _ = make_partition(ieee39, REST, ["1-39", "9-39"])
    p4, _ = make_partition(ieee39, [33, 34, 35, 36], ["16-17", "15-16"])
    assert require_same_partition([p1, p2]) is p1
    with pytest.raises(PartitionMismatch):
        require_same_partition([p1, p4])
